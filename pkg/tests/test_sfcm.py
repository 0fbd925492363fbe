import numpy as np
import pytest

from sfcmnet import autograd as ag
from sfcmnet.sfcm import ConnectionMode, SfcmParams, connect, feature_selector, select_features, selector_logits
from sfcmnet.tensor import ShapeError
from oracles import concat_loops, connect_loops, gate_loops, spatial_softmax_loops


def test_zero_selector_weights_give_zero_logits():
    y = np.random.default_rng(0).standard_normal((1, 3, 2, 2))
    m = selector_logits(y, np.zeros((1, 3, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(m.value, np.zeros((1, 1, 2, 2)))


def test_single_channel_identity_logits():
    y = np.random.default_rng(1).standard_normal((1, 1, 3, 3))
    np.testing.assert_array_equal(selector_logits(y, np.ones((1, 1, 1, 1))).value, y)


def test_logits_match_dot_product_oracle():
    rng = np.random.default_rng(2)
    y = rng.standard_normal((1, 3, 2, 2))
    w = rng.standard_normal((1, 3, 1, 1))
    expect = np.zeros((1, 1, 2, 2))
    for r in range(2):
        for c in range(2):
            expect[0, 0, r, c] = sum(w[0, ch, 0, 0] * y[0, ch, r, c] for ch in range(3))
    np.testing.assert_allclose(selector_logits(y, w).value, expect, atol=1e-12)


def test_logits_channel_mismatch():
    with pytest.raises(ShapeError, match="high-layer channels"):
        selector_logits(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 1, 1)))


def test_selector_examples():
    np.testing.assert_allclose(feature_selector(np.zeros((1, 1, 4, 4))).value, 1 / 16)
    np.testing.assert_allclose(feature_selector(np.zeros((1, 1, 2, 2))).value, 0.25)
    assert feature_selector(np.array([[[[7.0]]]])).value[0, 0, 0, 0] == 1.0
    s = feature_selector(np.array([[[[0.0, np.log(3.0)]]]])).value
    np.testing.assert_allclose(s[0, 0, 0], [0.25, 0.75], atol=1e-15)
    m = np.zeros((1, 1, 3, 3))
    m[0, 0, 1, 2] = 20
    s = feature_selector(m).value
    assert s[0, 0, 1, 2] > 0.999 and s.min() > 0


def test_selector_hard_selection_at_high_temperature():
    m = np.zeros((1, 1, 4, 4))
    m[0, 0, 3, 0] = 50
    s = feature_selector(m).value
    x = np.random.default_rng(3).standard_normal((1, 2, 4, 4))
    xs = select_features(x, s).value
    np.testing.assert_allclose(xs[0, :, 3, 0], x[0, :, 3, 0], rtol=1e-15)
    assert np.abs(np.delete(xs.reshape(2, 16), 12, axis=1)).max() < 1e-20


def test_uniform_selection_scales_by_area():
    x = np.random.default_rng(4).standard_normal((1, 3, 2, 2))
    np.testing.assert_allclose(select_features(x, np.full((1, 1, 2, 2), 0.25)).value, x / 4)


def test_one_hot_selection_keeps_one_column():
    x = np.random.default_rng(5).standard_normal((1, 3, 2, 2))
    s = np.zeros((1, 1, 2, 2))
    s[0, 0, 1, 0] = 1
    out = select_features(x, s).value
    np.testing.assert_array_equal(out[0, :, 1, 0], x[0, :, 1, 0])
    out[0, :, 1, 0] = 0
    assert not out.any()


def test_random_selection_matches_loops():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 3, 2, 2))
    s = rng.random((1, 1, 2, 2))
    s /= s.sum()
    np.testing.assert_allclose(select_features(x, s).value, gate_loops(x, s), atol=1e-7)


def test_residual_with_zero_scale_is_baseline_bit_exact():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 4)).astype(np.float32)
    y = rng.standard_normal((2, 5, 4, 4)).astype(np.float32)
    params = SfcmParams.init(5, rng)
    for gain in (1.0, 16.0):
        res = connect(x, y, params, ConnectionMode.RESIDUAL, selector_gain=gain).value
        base = connect(x, y, None, ConnectionMode.BASELINE).value
        assert res.tobytes() == base.tobytes()


def test_direct_with_uniform_selector():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((1, 2, 2, 2))
    y = rng.standard_normal((1, 3, 2, 2))
    out = connect(x, y, SfcmParams(np.zeros((1, 3, 1, 1))), "direct").value
    np.testing.assert_allclose(out[:, :2], x / 4)
    np.testing.assert_array_equal(out[:, 2:], y)


@pytest.mark.parametrize("mode", ["direct", "residual"])
@pytest.mark.parametrize("seed", range(5))
def test_connect_matches_composition_oracle(mode, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 2, 3, 3))
    y = rng.standard_normal((1, 4, 3, 3))
    w_g = rng.standard_normal((1, 4, 1, 1))
    b_g = float(rng.standard_normal())
    w_x = float(rng.standard_normal())
    sel = []
    out = connect(x, y, SfcmParams(w_g, np.array([b_g]), np.array([w_x])), mode, selector_out=sel).value
    expect, s = connect_loops(x, y, w_g, b_g, mode, w_x)
    np.testing.assert_allclose(out, expect, atol=1e-6)
    np.testing.assert_allclose(sel[0].value, s, atol=1e-12)


@pytest.mark.parametrize("mode", ["direct", "residual"])
def test_selector_gain_matches_oracle(mode):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 2, 3, 3))
    y = rng.standard_normal((2, 1, 3, 3))
    w_g = rng.standard_normal((1, 1, 1, 1))
    out = connect(x, y, SfcmParams(w_g, np.zeros(1), np.array([0.3])), mode, selector_gain=9.0).value
    np.testing.assert_allclose(out, connect_loops(x, y, w_g, 0.0, mode, 0.3, 9.0)[0], atol=1e-12)


def test_area_gain_with_uniform_selector_passes_x_through():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((1, 2, 4, 4))
    y = rng.standard_normal((1, 3, 4, 4))
    out = connect(x, y, SfcmParams(np.zeros((1, 3, 1, 1))), "direct", selector_gain=16.0).value
    np.testing.assert_allclose(out[:, :2], x, atol=1e-15)


def test_baseline_is_plain_concat():
    rng = np.random.default_rng(9)
    x, y = rng.standard_normal((1, 2, 2, 2)), rng.standard_normal((1, 1, 2, 2))
    np.testing.assert_array_equal(connect(x, y, mode="baseline").value, concat_loops(x, y))


def test_connect_errors():
    x, y = np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 2, 2))
    with pytest.raises(ShapeError, match="upsample"):
        connect(x, y, SfcmParams(np.zeros((1, 3, 1, 1))), "direct")
    with pytest.raises(ValueError, match="selector parameters"):
        connect(x, np.zeros((1, 3, 4, 4)), None, "direct")
    with pytest.raises(ValueError, match="w_x"):
        connect(x, np.zeros((1, 3, 4, 4)), SfcmParams(np.zeros((1, 3, 1, 1))), "residual")
    with pytest.raises(ValueError):
        connect(x, np.zeros((1, 3, 4, 4)), None, "sideways")


def test_upsampled_high_features_can_be_connected():
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, 2, 4, 4))
    y = ag.upsample_nearest_2x(rng.standard_normal((1, 3, 2, 2)))
    assert connect(x, y, SfcmParams.init(3, rng, dtype=np.float64), "direct").shape == (1, 5, 4, 4)


def test_params_validation_and_init():
    with pytest.raises(ShapeError):
        SfcmParams(np.zeros((2, 3, 1, 1)))
    with pytest.raises(ValueError):
        SfcmParams(np.full((1, 3, 1, 1), np.nan))
    p = SfcmParams.init(4, np.random.default_rng(0), scale=0.1)
    assert p.high_channels == 4 and p.w_x[0] == 0 and p.b_g[0] == 0
    assert np.abs(p.w_g).max() <= 0.1 / 2
