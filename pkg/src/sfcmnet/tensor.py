"""Raw NCHW numeric kernels.

Tensors are plain contiguous numpy arrays of float32 or float64.  Every kernel
returns a fresh array and never mutates its inputs.  The ``*_grad`` helpers are
the adjoints used by :mod:`sfcmnet.autograd`.
"""
from __future__ import annotations

import numpy as np

DTYPES = (np.float32, np.float64)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    arr = np.ascontiguousarray(np.asarray(data, dtype=dtype))
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if any(d < 1 for d in arr.shape):
        raise ShapeError(f"every extent must be >= 1, got {arr.shape}")
    return arr


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NonFiniteError(f"{what} has {bad} non-finite element(s)")
    return x


def _require_ndim(x: np.ndarray, ndim: int, name: str) -> None:
    if x.ndim != ndim:
        raise ShapeError(f"{name} must be {ndim}-D, got shape {x.shape}")


_AXES = ("N", "C", "H", "W")


def _require_match(a: np.ndarray, b: np.ndarray, axes, op: str) -> None:
    for ax in axes:
        if a.shape[ax] != b.shape[ax]:
            raise ShapeError(
                f"{op}: axis {_AXES[ax]} differs ({a.shape[ax]} vs {b.shape[ax]})"
            )


def _require_same_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes differ {a.shape} vs {b.shape}")


# --- channel concat ---------------------------------------------------------

def concat_channels(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    _require_ndim(x, 4, "x")
    _require_ndim(y, 4, "y")
    _require_match(x, y, (0, 2, 3), "concat_channels")
    return np.concatenate([x, y], axis=1)


def split_channels(o: np.ndarray, c1: int) -> tuple[np.ndarray, np.ndarray]:
    return np.ascontiguousarray(o[:, :c1]), np.ascontiguousarray(o[:, c1:])


# --- spatial softmax and gating ---------------------------------------------

def spatial_softmax(m: np.ndarray) -> np.ndarray:
    """Softmax over all H*W positions, independently per batch item."""
    _require_ndim(m, 4, "m")
    if m.shape[1] != 1:
        raise ShapeError(f"spatial_softmax expects 1 channel, got {m.shape[1]}")
    n = m.shape[0]
    flat = m.reshape(n, -1)
    e = np.exp(flat - flat.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)).reshape(m.shape)


def spatial_softmax_grad(s: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = s.shape[0]
    sf, gf = s.reshape(n, -1), g.reshape(n, -1)
    dot = np.sum(sf * gf, axis=1, keepdims=True)
    return (sf * (gf - dot)).reshape(s.shape)


def broadcast_gate(x: np.ndarray, s: np.ndarray) -> np.ndarray:
    _require_ndim(x, 4, "x")
    _require_ndim(s, 4, "s")
    if s.shape[1] != 1:
        raise ShapeError(f"gate must have 1 channel, got {s.shape[1]}")
    _require_match(x, s, (0, 2, 3), "broadcast_gate")
    return x * s


def broadcast_gate_grad(x, s, g):
    return g * s, np.sum(g * x, axis=1, keepdims=True)


# --- convolution ------------------------------------------------------------

def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, w, b, stride, pad):
    _require_ndim(x, 4, "x")
    _require_ndim(w, 4, "w")
    cout, cin, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"kernel must be square with odd extent, got {kh}x{kw}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    if x.shape[1] != cin:
        raise ShapeError(f"conv2d: axis C differs (input {x.shape[1]} vs kernel {cin})")
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kw:
        raise ShapeError(f"kernel {kh} larger than padded input {x.shape[2:]} (pad {pad})")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _flat_padded(x, pad):
    """(C, N*Hp*Wp) channel-major view of the zero-padded input."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    xf = np.zeros((c, n, hp, wp), dtype=x.dtype)
    xf[:, :, pad:pad + h, pad:pad + w] = x.transpose(1, 0, 2, 3)
    return xf.reshape(c, n * hp * wp), hp, wp


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlation by shift-and-add over the flattened padded input.

    Every tap (di, dj) is a fixed offset di*Wp + dj in the flattened
    (N, Hp, Wp) grid.  Results are computed at stride 1 on the padded grid,
    then cropped and subsampled.
    """
    _check_conv(x, w, b, stride, pad)
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xf, hp, wp = _flat_padded(x, pad)
    span = xf.shape[1] - (k - 1) * (wp + 1)
    # one product for all taps: rows t*O..(t+1)*O hold tap t's response at every position
    resp = np.ascontiguousarray(w.transpose(2, 3, 0, 1)).reshape(k * k * cout, cin) @ xf
    out = np.zeros((cout, n * hp * wp), dtype=np.result_type(x, w))
    acc = out[:, :span]
    for t in range(k * k):
        off = (t // k) * wp + t % k
        acc += resp[t * cout:(t + 1) * cout, off:off + span]
    ho, wo = conv_output_size(h, k, stride, pad), conv_output_size(wd, k, stride, pad)
    out = out.reshape(cout, n, hp, wp)[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride]
    out = out.transpose(1, 0, 2, 3)
    if b is not None:
        out = out + b.reshape(1, cout, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_grad(x, w, g, stride: int = 1, pad: int = 0, with_bias: bool = False):
    """Adjoints of :func:`conv2d` w.r.t. input, weight and (optionally) bias.

    At stride 1 the input adjoint is itself a convolution of ``g`` with the
    spatially flipped, channel-transposed kernel.
    """
    n, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xf, hp, wp = _flat_padded(x, pad)
    span = xf.shape[1] - (k - 1) * (wp + 1)
    gfull = np.zeros((cout, n, hp, wp), dtype=g.dtype)
    gfull[:, :, :stride * (ho - 1) + 1:stride, :stride * (wo - 1) + 1:stride] = g.transpose(1, 0, 2, 3)
    gfull = gfull.reshape(cout, -1)[:, :span]
    # the output adjoint shifted to each tap's offset, stacked: one product gives every tap's weight adjoint
    shifted = np.zeros((k * k, cout, xf.shape[1]), dtype=g.dtype)
    for t in range(k * k):
        off = (t // k) * wp + t % k
        shifted[t, :, off:off + span] = gfull
    dtaps = (shifted.reshape(k * k * cout, -1) @ xf.T).reshape(k, k, cout, cin)
    dw = np.ascontiguousarray(dtaps.transpose(2, 3, 0, 1)).astype(w.dtype)
    if stride == 1 and pad <= k - 1:
        dx = conv2d(g, np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)), None, 1, k - 1 - pad)
    else:
        taps_t = np.ascontiguousarray(w.transpose(2, 3, 1, 0))
        dxf = np.zeros_like(xf)
        for di in range(k):
            for dj in range(k):
                off = di * wp + dj
                dxf[:, off:off + span] += taps_t[di, dj] @ gfull
        dx = dxf.reshape(cin, n, hp, wp)[:, :, pad:pad + h, pad:pad + wd].transpose(1, 0, 2, 3)
    db = g.sum(axis=(0, 2, 3)) if with_bias else None
    return np.ascontiguousarray(dx), dw, db


# --- auxiliary kernels ------------------------------------------------------

def channel_stats(x):
    """Per-channel mean and biased variance over (N, H, W)."""
    m = x.shape[0] * x.shape[2] * x.shape[3]
    mu = np.einsum("nchw->c", x) / m
    xc = x - mu.reshape(1, -1, 1, 1).astype(x.dtype)
    return mu.astype(x.dtype), (np.einsum("nchw,nchw->c", xc, xc) / m).astype(x.dtype)


def add(a, b):
    _require_same_shape(a, b, "add")
    return a + b


def mul(a, b):
    _require_same_shape(a, b, "mul")
    return a * b


def scale_by_scalar(x, c: float):
    return x * x.dtype.type(c)


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, g):
    return g * (x > 0)


def avgpool2x2(x):
    _require_ndim(x, 4, "x")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 needs even H, W, got {h}x{w}")
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2x2_grad(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) * g.dtype.type(0.25)


def global_avgpool(x):
    _require_ndim(x, 4, "x")
    return x.mean(axis=(2, 3))


def global_avgpool_grad(x_shape, g):
    n, c, h, w = x_shape
    return np.broadcast_to(g.reshape(n, c, 1, 1) / (h * w), x_shape).copy()


def upsample_nearest_2x(x):
    _require_ndim(x, 4, "x")
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample_nearest_2x_grad(g):
    n, c, h, w = g.shape
    return g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


def matvec(x, w, b=None):
    """Linear layer: rows of ``x`` (N, D) times ``w`` (K, D) transposed, plus ``b``."""
    _require_ndim(x, 2, "x")
    _require_ndim(w, 2, "w")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"matvec: feature dims differ ({x.shape[1]} vs {w.shape[1]})")
    out = x @ w.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias must have shape ({w.shape[0]},), got {b.shape}")
        out = out + b
    return out


def argmax_channel(x):
    """Index of the largest entry along axis 1 (class axis for (N, K) logits)."""
    return np.argmax(x, axis=1)
