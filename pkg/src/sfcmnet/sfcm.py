"""Selective feature connection: gate low-layer features with a spatial
softmax selector computed from high-layer features, then concatenate.

All functions accept either :class:`~sfcmnet.autograd.Node` objects or plain
arrays and return nodes, so the same code serves training and inference.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from sfcmnet import autograd as ag
from sfcmnet.tensor import ShapeError


class ConnectionMode(str, enum.Enum):
    BASELINE = "baseline"
    DIRECT = "direct"
    RESIDUAL = "residual"


@dataclass
class SfcmParams:
    """Selector weights ``w_g`` (1, C2, 1, 1), optional bias ``b_g`` (1,),
    and the residual scale ``w_x`` (1,) used only in residual mode."""

    w_g: np.ndarray
    b_g: np.ndarray | None = None
    w_x: np.ndarray | None = None

    def __post_init__(self):
        if self.w_g.ndim != 4 or self.w_g.shape[0] != 1 or self.w_g.shape[2:] != (1, 1):
            raise ShapeError(f"w_g must have shape (1, C2, 1, 1), got {self.w_g.shape}")
        for name in ("w_g", "b_g", "w_x"):
            v = getattr(self, name)
            if v is not None and not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")

    @classmethod
    def init(cls, high_channels: int, rng: np.random.Generator, scale: float = 0.1,
             dtype=np.float32) -> "SfcmParams":
        """Small uniform fan-in-scaled selector weights, zero bias, zero residual scale."""
        bound = scale / np.sqrt(high_channels)
        w_g = rng.uniform(-bound, bound, size=(1, high_channels, 1, 1)).astype(dtype)
        return cls(w_g, np.zeros(1, dtype), np.zeros(1, dtype))

    @property
    def high_channels(self) -> int:
        return self.w_g.shape[1]


def _bind(graph: ag.Graph, params):
    """Turn SfcmParams into constant nodes (params already given as nodes pass through)."""
    if isinstance(params, SfcmParams):
        w_g = graph.constant(params.w_g)
        b_g = None if params.b_g is None else graph.constant(params.b_g)
        w_x = None if params.w_x is None else graph.constant(params.w_x)
        return w_g, b_g, w_x
    return params["w_g"], params.get("b_g"), params.get("w_x")


def selector_logits(y, w_g, b_g=None):
    """Attention scores: a bare 1x1 convolution of the high-layer features."""
    y, w_g, b_g = ag._nodes(y, w_g, b_g)
    if y.shape is not None and w_g.shape is not None and y.shape[1] != w_g.shape[1]:
        raise ShapeError(f"selector expects {w_g.shape[1]} high-layer channels, got {y.shape[1]}")
    return ag.conv2d(y, w_g, b_g)


def feature_selector(m):
    return ag.spatial_softmax(m)


def select_features(x, s):
    return ag.broadcast_gate(x, s)


def connect(x, y, params=None, mode: ConnectionMode | str = ConnectionMode.DIRECT,
            selector_out: list | None = None, selector_gain: float = 1.0):
    """Fuse low-layer ``x`` (N,C1,H,W) with high-layer ``y`` (N,C2,H,W).

    ``params`` is an :class:`SfcmParams` or a mapping with ``w_g``/``b_g``/``w_x``
    nodes.  When ``selector_out`` is a list, the selector node is appended to it.

    ``Xs`` is multiplied by ``selector_gain`` before fusion: direct mode emits
    ``[gain * Xs, y]`` and residual mode ``[w_x * gain * Xs + x, y]``.  The
    default gain of 1 is the bare formula.  A gain of H*W measures the selector
    relative to the uniform map (a uniform selector then passes ``x`` through
    unchanged); without it a sum-to-one selector shrinks ``Xs`` by 1/(H*W),
    which starves both the residual scale and the following batch norm.
    """
    mode = ConnectionMode(mode)
    x, y = ag._nodes(x, y)
    if x.shape is not None and y.shape is not None:
        for ax, name in ((0, "N"), (2, "H"), (3, "W")):
            if x.shape[ax] != y.shape[ax]:
                raise ShapeError(
                    f"connect: axis {name} differs ({x.shape[ax]} vs {y.shape[ax]}); "
                    "resample with upsample/pool first"
                )
    if mode is ConnectionMode.BASELINE:
        return ag.concat_channels(x, y)
    if params is None:
        raise ValueError(f"{mode.value} mode needs selector parameters")
    w_g, b_g, w_x = _bind(x.graph, params)
    s = feature_selector(selector_logits(y, w_g, b_g))
    if selector_out is not None:
        selector_out.append(s)
    xs = select_features(x, s)
    if selector_gain != 1.0:
        xs = ag.scale(xs, selector_gain)
    if mode is ConnectionMode.DIRECT:
        return ag.concat_channels(xs, y)
    if w_x is None:
        raise ValueError("residual mode needs a residual scale w_x")
    return ag.concat_channels(ag.add(ag.scalar_mul(xs, w_x), x), y)
