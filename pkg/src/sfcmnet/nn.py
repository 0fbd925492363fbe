"""Conventional layers for small convolutional backbones.

Layers are stateless descriptions.  Parameters live in a flat ``{name: array}``
mapping and batch-norm running statistics in a separate ``state`` mapping, so a
model is just (layers, params, state).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from sfcmnet import autograd as ag
from sfcmnet.tensor import ShapeError, channel_stats


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, parameter name): init is independent of creation order."""
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def fan_in_uniform(rng, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    name: str

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_params(self, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
        return {}

    def init_state(self, dtype=np.float32) -> dict[str, np.ndarray]:
        return {}

    def forward(self, x, params: Mapping, training: bool, state: dict | None = None):
        raise NotImplementedError

    def _p(self, params, key):
        return params[f"{self.name}.{key}"]


@dataclass
class Conv2d(Layer):
    name: str
    cin: int
    cout: int
    k: int = 3
    stride: int = 1
    pad: int | None = None
    bias: bool = False

    def __post_init__(self):
        if self.k % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {self.k}")
        if self.pad is None:
            self.pad = self.k // 2

    def param_shapes(self):
        shapes = {"w": (self.cout, self.cin, self.k, self.k)}
        if self.bias:
            shapes["b"] = (self.cout,)
        return shapes

    def init_params(self, seed, dtype=np.float32):
        fan_in = self.cin * self.k * self.k
        out = {f"{self.name}.w": fan_in_uniform(param_rng(seed, f"{self.name}.w"),
                                                (self.cout, self.cin, self.k, self.k), fan_in, dtype)}
        if self.bias:
            out[f"{self.name}.b"] = np.zeros(self.cout, dtype)
        return out

    def forward(self, x, params, training, state=None):
        b = self._p(params, "b") if self.bias else None
        return ag.conv2d(x, self._p(params, "w"), b, stride=self.stride, pad=self.pad)


@dataclass
class ReLU(Layer):
    name: str = "relu"

    def forward(self, x, params, training, state=None):
        return ag.relu(x)


@dataclass
class AvgPool2x2(Layer):
    name: str = "pool"

    def forward(self, x, params, training, state=None):
        return ag.avgpool2x2(x)


@dataclass
class GlobalAvgPool(Layer):
    name: str = "gap"

    def forward(self, x, params, training, state=None):
        return ag.global_avgpool(x)


@dataclass
class Linear(Layer):
    name: str
    din: int
    dout: int

    def param_shapes(self):
        return {"w": (self.dout, self.din), "b": (self.dout,)}

    def init_params(self, seed, dtype=np.float32):
        return {
            f"{self.name}.w": fan_in_uniform(param_rng(seed, f"{self.name}.w"),
                                             (self.dout, self.din), self.din, dtype),
            f"{self.name}.b": np.zeros(self.dout, dtype),
        }

    def forward(self, x, params, training, state=None):
        return ag.linear(x, self._p(params, "w"), self._p(params, "b"))


@dataclass
class BatchNormLite(Layer):
    """Per-channel normalisation over (N, H, W).

    Training mode normalises with batch statistics and, when ``state`` is
    given, folds them into the running estimates; eval mode is a fixed affine
    map built from the running estimates.
    """

    name: str
    channels: int
    momentum: float = 0.1
    eps: float = 1e-5

    def param_shapes(self):
        return {"gamma": (self.channels,), "beta": (self.channels,)}

    def init_params(self, seed, dtype=np.float32):
        return {f"{self.name}.gamma": np.ones(self.channels, dtype),
                f"{self.name}.beta": np.zeros(self.channels, dtype)}

    def init_state(self, dtype=np.float32):
        return {f"{self.name}.running_mean": np.zeros(self.channels, dtype),
                f"{self.name}.running_var": np.ones(self.channels, dtype)}

    def forward(self, x, params, training, state=None):
        gamma, beta = self._p(params, "gamma"), self._p(params, "beta")
        x = ag._nodes(x)[0]
        if x.shape is not None and x.shape[1] != self.channels:
            raise ShapeError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        if training:
            if state is not None:
                self._update_running(x.value, state)
            return ag.batchnorm_train(x, gamma, beta, eps=self.eps)
        mean_key, var_key = f"{self.name}.running_mean", f"{self.name}.running_var"
        if state is None or mean_key not in state:
            raise KeyError(f"{self.name}: eval mode needs running statistics")
        return ag.batchnorm_eval(x, gamma, beta, state[mean_key], state[var_key], eps=self.eps)

    def _update_running(self, x: np.ndarray, state: dict) -> None:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        mean, var = channel_stats(x)
        var = var * (m / max(m - 1, 1))
        mk, vk = f"{self.name}.running_mean", f"{self.name}.running_var"
        mom = self.momentum
        state[mk] = ((1 - mom) * state[mk] + mom * mean).astype(state[mk].dtype)
        state[vk] = ((1 - mom) * state[vk] + mom * var).astype(state[vk].dtype)


def init_parameters(layers, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for layer in layers:
        for key, value in layer.init_params(seed, dtype).items():
            if key in params:
                raise ValueError(f"duplicate parameter {key!r}")
            params[key] = value
    return params


def init_state(layers, dtype=np.float32) -> dict[str, np.ndarray]:
    state: dict[str, np.ndarray] = {}
    for layer in layers:
        state.update(layer.init_state(dtype))
    return state


def layer_forward(layer: Layer, x, training: bool, params: Mapping | None = None,
                  state: dict | None = None):
    """Run one layer; array params are wrapped as constants on ``x``'s graph."""
    x = ag._nodes(x)[0]
    bound = {k: v if isinstance(v, ag.Node) else x.graph.constant(v)
             for k, v in (params or {}).items()}
    return layer.forward(x, bound, training, state)
