"""Dense-block classifiers with plain or selective feature connections.

Inside an SFCM-enabled block every dense connection is fused with
:func:`sfcmnet.sfcm.connect`: the features accumulated so far act as the
low-layer input and the newest layer's ``k`` output channels as the high-layer
input that generates the selector.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from sfcmnet import autograd as ag
from sfcmnet import nn
from sfcmnet.sfcm import ConnectionMode, SfcmParams, connect


@dataclass
class ModelConfig:
    blocks: int = 2
    layers_per_block: int = 3
    growth_rate: int = 8
    input_channels: int = 3
    classes: int = 10
    mode: str = "baseline"
    sfcm_blocks: tuple[int, ...] = ()
    image_size: int = 16
    stem_channels: int | None = None  # default 2 * growth_rate
    selector_init_scale: float = 0.1
    # scale on Xs before fusion: "area" = H*W, "unit" = 1, "auto" = area in residual mode, unit in direct mode
    selector_gain: str = "auto"

    def __post_init__(self):
        self.mode = ConnectionMode(self.mode).value
        if self.selector_gain not in ("auto", "area", "unit"):
            raise ValueError(f"selector_gain must be 'auto', 'area' or 'unit', got {self.selector_gain!r}")
        self.sfcm_blocks = tuple(sorted(set(int(b) for b in self.sfcm_blocks)))
        if min(self.blocks, self.layers_per_block, self.growth_rate,
               self.input_channels, self.classes) < 1:
            raise ValueError("blocks, layers_per_block, growth_rate, input_channels and classes must be >= 1")
        if self.mode == ConnectionMode.BASELINE.value and self.sfcm_blocks:
            raise ValueError("sfcm_blocks must be empty in baseline mode")
        bad = [b for b in self.sfcm_blocks if not 1 <= b <= self.blocks]
        if bad:
            raise ValueError(f"sfcm_blocks {bad} outside 1..{self.blocks}")
        if self.image_size % (2 ** (self.blocks - 1)):
            raise ValueError(f"image_size {self.image_size} not divisible by 2^(blocks-1)")

    @property
    def stem(self) -> int:
        return self.stem_channels or 2 * self.growth_rate

    def block_channels(self) -> list[tuple[int, int]]:
        """(input, output) channels per block; output = input + layers * k."""
        out, c = [], self.stem
        for _ in range(self.blocks):
            out.append((c, c + self.layers_per_block * self.growth_rate))
            c = out[-1][1]
        return out

    @property
    def conv_feature_layers(self) -> int:
        return self.blocks * self.layers_per_block

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sfcm_blocks"] = list(self.sfcm_blocks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class _DenseLayer:
    bn: nn.BatchNormLite
    conv: nn.Conv2d
    sfcm: str | None = None  # parameter prefix when this connection is selective


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray]
    stem: nn.Conv2d = None
    blocks: list = field(default_factory=list)
    transitions: list = field(default_factory=list)
    head: tuple = ()

    @property
    def layers(self) -> list[nn.Layer]:
        out = [self.stem]
        for block in self.blocks:
            for dl in block:
                out += [dl.bn, dl.conv]
        for bn, conv in self.transitions:
            out += [bn, conv]
        out += [self.head[0], self.head[1]]
        return out

    def _area_gain(self) -> bool:
        gain = self.config.selector_gain
        return gain == "area" or (gain == "auto" and self.config.mode == ConnectionMode.RESIDUAL.value)

    def sfcm_sites(self) -> list[str]:
        return [dl.sfcm for block in self.blocks for dl in block if dl.sfcm]

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def bind(self, graph: ag.Graph, trainable: bool = True) -> dict[str, ag.Node]:
        if trainable:
            return {k: graph.param(v, k) for k, v in self.params.items()}
        return {k: graph.constant(v) for k, v in self.params.items()}

    def build(self, x: ag.Node, p: dict, training: bool, update_state: bool = True):
        """Append the forward pass to ``x``'s graph; returns (logits, selector nodes)."""
        cfg = self.config
        mode = ConnectionMode(cfg.mode)
        state = self.state if update_state else dict(self.state)
        selectors: list[ag.Node] = []
        h = self.stem.forward(x, p, training)
        for bi, block in enumerate(self.blocks):
            for dl in block:
                new = dl.conv.forward(ag.relu(dl.bn.forward(h, p, training, state)), p, training)
                if dl.sfcm is None:
                    h = ag.concat_channels(h, new)
                else:
                    site = {k: p[f"{dl.sfcm}.{k}"] for k in ("w_g", "b_g", "w_x")
                            if f"{dl.sfcm}.{k}" in p}
                    gain = h.shape[2] * h.shape[3] if self._area_gain() else 1.0
                    h = connect(h, new, site, mode, selector_out=selectors, selector_gain=gain)
            if bi < len(self.transitions):
                bn, conv = self.transitions[bi]
                h = ag.avgpool2x2(conv.forward(ag.relu(bn.forward(h, p, training, state)), p, training))
        bn, fc = self.head
        logits = fc.forward(ag.global_avgpool(ag.relu(bn.forward(h, p, training, state))), p, training)
        return logits, selectors


def build_model(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    cfg = config
    k = cfg.growth_rate
    stem = nn.Conv2d("stem", cfg.input_channels, cfg.stem, 3)
    blocks, transitions = [], []
    sfcm_params: dict[str, np.ndarray] = {}
    chans = cfg.block_channels()
    for b, (cin, cout) in enumerate(chans, start=1):
        layers, c = [], cin
        for ell in range(1, cfg.layers_per_block + 1):
            pre = f"block{b}.layer{ell}"
            site = f"{pre}.sfcm" if b in cfg.sfcm_blocks else None
            layers.append(_DenseLayer(nn.BatchNormLite(f"{pre}.bn", c), nn.Conv2d(f"{pre}.conv", c, k, 3), site))
            if site:
                sp = SfcmParams.init(k, nn.param_rng(seed, f"{site}.w_g"), cfg.selector_init_scale, dtype)
                sfcm_params[f"{site}.w_g"] = sp.w_g
                sfcm_params[f"{site}.b_g"] = sp.b_g
                if cfg.mode == ConnectionMode.RESIDUAL.value:
                    sfcm_params[f"{site}.w_x"] = sp.w_x
            c += k
        if c != cout:
            raise ValueError(f"channel arithmetic mismatch in block {b}: {c} != {cout}")
        blocks.append(layers)
        if b < cfg.blocks:
            transitions.append((nn.BatchNormLite(f"trans{b}.bn", cout), nn.Conv2d(f"trans{b}.conv", cout, cout, 1)))
    final = chans[-1][1]
    head = (nn.BatchNormLite("head.bn", final), nn.Linear("head.fc", final, cfg.classes))
    model = Model(cfg, {}, {}, stem, blocks, transitions, head)
    model.params = nn.init_parameters(model.layers, seed, dtype)
    model.params.update(sfcm_params)
    model.state = nn.init_state(model.layers, dtype)
    return model


def model_forward(model: Model, batch: np.ndarray, training: bool = False):
    """Logits (N, classes) and the selector maps of every SFCM site, as arrays."""
    cfg = model.config
    batch = np.asarray(batch)
    expected = (cfg.input_channels, cfg.image_size, cfg.image_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise ValueError(f"batch must have shape (N, {expected}), got {batch.shape}")
    g = ag.Graph()
    x = g.input("x", batch)
    logits, sels = model.build(x, model.bind(g, trainable=False), training)
    return logits.value, [s.value for s in sels]


# -- checkpoints -------------------------------------------------------------------

CONFIG_ENTRY = "__config__"


def save_checkpoint(model: Model, path) -> None:
    from sfcmnet.data import write_tsr

    header = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    entries = {CONFIG_ENTRY: np.frombuffer(header, dtype=np.uint8).astype(np.float32)}
    entries.update(model.params)
    entries.update({f"state.{k}": v for k, v in model.state.items()})
    write_tsr(path, entries)


def load_checkpoint(path) -> Model:
    from sfcmnet.data import read_tsr

    entries = read_tsr(path)
    if CONFIG_ENTRY not in entries:
        raise ValueError(f"{path}: not a model checkpoint (no config header)")
    header = entries.pop(CONFIG_ENTRY).astype(np.uint8).tobytes()
    model = build_model(ModelConfig.from_dict(json.loads(header)))
    state = {k[len("state."):]: v for k, v in entries.items() if k.startswith("state.")}
    params = {k: v for k, v in entries.items() if not k.startswith("state.")}
    if set(params) != set(model.params) or set(state) != set(model.state):
        raise ValueError(f"{Path(path).name}: entries do not match the stored config")
    model.params, model.state = params, state
    return model
