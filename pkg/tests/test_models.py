import numpy as np
import pytest

from sfcmnet import autograd as ag
from sfcmnet.models import ModelConfig, build_model, load_checkpoint, model_forward, save_checkpoint

SMALL = dict(blocks=2, layers_per_block=2, growth_rate=4, stem_channels=4, classes=3, image_size=8)


def test_depth_bookkeeping():
    cfg = ModelConfig(blocks=3, layers_per_block=4, growth_rate=12, mode="baseline", image_size=32)
    assert cfg.conv_feature_layers == 12
    model = build_model(cfg)
    assert sum(len(b) for b in model.blocks) == 12
    assert cfg.block_channels()[0] == (24, 72)


@pytest.mark.parametrize("bad", [dict(mode="baseline", sfcm_blocks=[1]), dict(mode="direct", sfcm_blocks=[3]),
                                 dict(image_size=10, blocks=3), dict(growth_rate=0), dict(mode="other")])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        ModelConfig(**bad)


def test_config_round_trip():
    cfg = ModelConfig(mode="direct", sfcm_blocks=(2, 1, 2))
    assert cfg.sfcm_blocks == (1, 2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.parametrize("seed", range(3))
def test_residual_init_is_bit_exact_baseline(seed):
    base = build_model(ModelConfig(**SMALL), seed)
    res = build_model(ModelConfig(**SMALL, mode="residual", sfcm_blocks=(1, 2)), seed)
    x = np.random.default_rng(seed).random((4, 3, 8, 8), dtype=np.float32)
    lb, _ = model_forward(base, x)
    lr, sels = model_forward(res, x)
    assert lb.tobytes() == lr.tobytes()
    assert len(sels) == 4


def test_parameter_count_difference():
    base = build_model(ModelConfig(**SMALL))
    for blocks in [(1,), (1, 2)]:
        direct = build_model(ModelConfig(**SMALL, mode="direct", sfcm_blocks=blocks))
        residual = build_model(ModelConfig(**SMALL, mode="residual", sfcm_blocks=blocks))
        sites = len(direct.sfcm_sites())
        assert sites == 2 * len(blocks)
        k = SMALL["growth_rate"]
        assert direct.parameter_count() - base.parameter_count() == sites * (k + 1)
        assert residual.parameter_count() - direct.parameter_count() == sites


def test_forward_properties():
    model = build_model(ModelConfig(**SMALL, mode="direct", sfcm_blocks=(1, 2)), 1)
    img = np.random.default_rng(0).random((1, 3, 8, 8), dtype=np.float32)
    logits, sels = model_forward(model, np.concatenate([img, img]))
    assert logits.shape == (2, 3)
    assert logits[0].tobytes() == logits[1].tobytes()
    for s in sels:
        np.testing.assert_allclose(s.sum(axis=(1, 2, 3)), 1.0, atol=1e-6)
    assert [s.shape[2] for s in sels] == [8, 8, 4, 4]
    _, none = model_forward(build_model(ModelConfig(**SMALL)), img)
    assert none == []
    with pytest.raises(ValueError):
        model_forward(model, np.zeros((1, 3, 16, 16)))


def test_eval_forward_leaves_state_untouched():
    model = build_model(ModelConfig(**SMALL, mode="direct", sfcm_blocks=(1,)))
    before = {k: v.copy() for k, v in model.state.items()}
    model_forward(model, np.random.default_rng(0).random((2, 3, 8, 8)))
    assert all(np.array_equal(before[k], model.state[k]) for k in before)


@pytest.mark.parametrize("mode", ["baseline", "direct", "residual"])
def test_end_to_end_gradcheck(mode):
    cfg = ModelConfig(blocks=1, layers_per_block=2, growth_rate=2, stem_channels=2, classes=3, image_size=6,
                      mode=mode, sfcm_blocks=() if mode == "baseline" else (1,))
    model = build_model(cfg, 0, dtype=np.float64)
    for k in model.params:
        if k.endswith("w_x"):
            model.params[k] = np.array([0.7])
    rng = np.random.default_rng(1)
    g = ag.Graph()
    x = g.input("x", rng.random((3, 3, 6, 6)))
    logits, _ = model.build(x, model.bind(g), training=True, update_state=False)
    report = ag.gradcheck(g, ag.cross_entropy(logits, np.array([0, 1, 2])))
    assert report.max_error < 1e-4, sorted(report.errors.items(), key=lambda kv: -kv[1])[:3]


def test_checkpoint_round_trip(tmp_path):
    model = build_model(ModelConfig(**SMALL, mode="residual", sfcm_blocks=(2,)), 5)
    model.state["head.bn.running_mean"] += 1.5
    save_checkpoint(model, tmp_path / "m.tsr")
    loaded = load_checkpoint(tmp_path / "m.tsr")
    assert loaded.config == model.config
    for k, v in model.params.items():
        assert loaded.params[k].tobytes() == v.tobytes()
    x = np.random.default_rng(0).random((2, 3, 8, 8), dtype=np.float32)
    assert model_forward(model, x)[0].tobytes() == model_forward(loaded, x)[0].tobytes()


def test_load_rejects_plain_tensor_file(tmp_path):
    from sfcmnet.data import write_tsr
    write_tsr(tmp_path / "x.tsr", {"a": np.zeros(2, np.float32)})
    with pytest.raises(ValueError, match="config header"):
        load_checkpoint(tmp_path / "x.tsr")
