import numpy as np
import pytest

from sfcmnet import autograd as ag
from sfcmnet import gradsuite
from sfcmnet import tensor as T


def test_relu_graph_forward():
    g = ag.Graph()
    out = ag.relu(g.input("x", np.array([-1.0, 2.0])))
    np.testing.assert_array_equal(out.value, [0.0, 2.0])


def test_concat_self_shape():
    g = ag.Graph()
    x = g.input("x", np.ones((1, 1, 1, 1)))
    assert ag.concat_channels(x, x).shape == (1, 2, 1, 1)


def test_chain_equals_kernel_composition():
    rng = np.random.default_rng(0)
    y = rng.standard_normal((2, 3, 4, 4))
    x = rng.standard_normal((2, 5, 4, 4))
    w = rng.standard_normal((1, 3, 1, 1))
    g = ag.Graph()
    out = ag.broadcast_gate(g.input("x", x), ag.spatial_softmax(ag.conv2d(g.input("y", y), g.constant(w))))
    direct = T.broadcast_gate(x, T.spatial_softmax(T.conv2d(y, w)))
    np.testing.assert_array_equal(out.value, direct)


def test_replay_with_new_inputs():
    g = ag.Graph()
    x = g.input("x")
    out = ag.total(ag.relu(x))
    assert out.value is None
    assert g.forward({"x": np.array([-1.0, 3.0])})[0] == 3.0
    assert g.forward({"x": np.array([5.0, 3.0])})[0] == 8.0
    with pytest.raises(ag.GraphError):
        g.forward({"nope": np.zeros(1)})


def test_unbound_leaf_is_reported():
    g = ag.Graph()
    ag.relu(g.input("x"))
    with pytest.raises(ag.UnboundLeafError):
        g.forward()


def test_scale_gradient_is_constant():
    g = ag.Graph()
    x = g.param(np.random.default_rng(1).standard_normal((2, 3)), "x")
    grads = g.backward(ag.total(ag.scale(x, 3)))
    np.testing.assert_array_equal(grads["x"], np.full((2, 3), 3.0))


def test_dead_relu_gives_zero_gradient():
    g = ag.Graph()
    x = g.param(-np.ones((4,)), "x")
    np.testing.assert_array_equal(g.backward(ag.total(ag.relu(x)))["x"], np.zeros(4))


def test_backward_accumulates_over_fanout():
    g = ag.Graph()
    x = g.param(np.array([2.0]), "x")
    loss = ag.total(ag.mul(x, x) + x)  # x^2 + x
    assert g.backward(loss)["x"][0] == 5.0


def test_unreachable_param_has_zero_grad_and_leaf_grad():
    g = ag.Graph()
    a = g.param(np.ones(3), "a")
    g.param(np.ones(2), "unused")
    c = g.input("c", np.array([1.0, 2.0, 3.0]))
    grads = g.backward(ag.total(ag.mul(a, c)))
    np.testing.assert_array_equal(grads["unused"], np.zeros(2))
    np.testing.assert_array_equal(g.grad(c), np.ones(3))


def test_backward_requires_scalar():
    g = ag.Graph()
    x = g.param(np.ones(3), "x")
    with pytest.raises(ag.GraphError, match="scalar"):
        g.backward(ag.relu(x))


def test_duplicate_param_names_rejected():
    g = ag.Graph()
    g.param(np.ones(1), "w")
    with pytest.raises(ag.GraphError):
        g.param(np.ones(1), "w")


def test_mixing_graphs_rejected():
    a = ag.Graph().param(np.ones(1), "a")
    b = ag.Graph().param(np.ones(1), "b")
    with pytest.raises(ag.GraphError):
        ag.add(a, b)


def test_node_operators():
    g = ag.Graph()
    x = g.param(np.array([1.0, 2.0]), "x")
    np.testing.assert_array_equal((x + x).value, [2, 4])
    np.testing.assert_array_equal((x * 3).value, [3, 6])
    np.testing.assert_array_equal((2.0 * x).value, [2, 4])


def test_gradcheck_quadratic():
    g = ag.Graph()
    theta = g.param(np.array([0.3, -1.2, 2.0, 0.7]), "theta")
    report = ag.gradcheck(g, ag.total(ag.mul(theta, theta)))
    assert report.passed and report.max_error < 1e-7


def test_gradcheck_constant_loss():
    g = ag.Graph()
    theta = g.param(np.ones(3), "theta")
    loss = ag.total(g.constant(np.ones(2)))
    report = ag.gradcheck(g, loss)
    assert report.passed and report.errors["theta"] == 0.0
    assert theta.value.sum() == 3.0


def test_gradcheck_composite_on_5x5():
    rng = np.random.default_rng(3)
    g = ag.Graph()
    x = g.param(rng.standard_normal((1, 2, 5, 5)), "x")
    y = g.param(rng.standard_normal((1, 3, 5, 5)), "y")
    w_g = g.param(rng.standard_normal((1, 3, 1, 1)), "w_g")
    w_x = g.param(rng.standard_normal(1), "w_x")
    from sfcmnet.sfcm import connect
    out = connect(x, y, {"w_g": w_g, "w_x": w_x}, "residual")
    loss = ag.total(ag.mul(out, g.constant(rng.standard_normal(out.shape))))
    report = ag.gradcheck(g, loss)
    assert report.passed, report.errors
    assert "param,max_rel_err,pass" in report.to_csv()


def test_gradcheck_guards():
    g = ag.Graph()
    x = g.param(np.ones(2, dtype=np.float32), "x")
    with pytest.raises(TypeError):
        ag.gradcheck(g, ag.total(x))
    g2 = ag.Graph()
    y = g2.param(np.ones(2), "y")
    with pytest.raises(ValueError):
        ag.gradcheck(g2, ag.total(y), eps=0.5)


def test_selector_bias_gradient_is_exactly_zero():
    # softmax over positions ignores a common shift, so b_g never receives gradient
    rng = np.random.default_rng(5)
    g = ag.Graph()
    x = g.input("x", rng.standard_normal((2, 2, 3, 3)))
    y = g.input("y", rng.standard_normal((2, 3, 3, 3)))
    w_g = g.param(rng.standard_normal((1, 3, 1, 1)), "w_g")
    b_g = g.param(np.array([0.4]), "b_g")
    from sfcmnet.sfcm import connect
    out = connect(x, y, {"w_g": w_g, "b_g": b_g}, "direct")
    grads = g.backward(ag.total(ag.mul(out, g.constant(rng.standard_normal(out.shape)))))
    assert abs(grads["b_g"][0]) < 1e-14


def test_cross_entropy_values():
    from oracles import cross_entropy_loops
    assert ag.cross_entropy(np.zeros((1, 10)), np.array([3])).value[0] == pytest.approx(np.log(10), abs=1e-12)
    sat = np.zeros((2, 4))
    sat[0, 1] = sat[1, 2] = 30.0
    assert ag.cross_entropy(sat, np.array([1, 2])).value[0] < 1e-9
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((5, 3))
    labels = rng.integers(0, 3, size=5)
    assert ag.cross_entropy(logits, labels).value[0] == pytest.approx(cross_entropy_loops(logits, labels), abs=1e-10)
    with pytest.raises(ValueError):
        ag.cross_entropy(logits, np.array([0, 1, 2, 3, 0]))


@pytest.mark.parametrize("op", list(gradsuite.CASES))
def test_gradient_suite_per_op(op):
    result = gradsuite.check_op(op, instances=50)
    assert result.passed, result
    assert result.max_rel_err < 1e-5


def test_coarse_eps_is_detected():
    result = gradsuite.check_op("spatial_softmax", instances=10, eps=1e-1)
    assert not result.passed
