"""Define-by-run reverse-mode differentiation over the kernels in :mod:`sfcmnet.tensor`.

A :class:`Graph` is a tape.  Applying an op appends a :class:`Node` and, when
every parent already holds a value, evaluates it immediately.  The tape can be
replayed with :meth:`Graph.forward`, which is what the finite-difference
checker relies on.

    g = Graph()
    x = g.param(np.random.randn(1, 3, 4, 4), "x")
    loss = total(relu(x))
    grads = g.backward(loss)
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from sfcmnet import tensor as T


class GraphError(RuntimeError):
    pass


class UnboundLeafError(GraphError):
    pass


@dataclass(frozen=True)
class Op:
    forward: Callable
    backward: Callable  # (g, parent_values, out, **attrs) -> tuple of grads (None = no grad)
    deterministic: bool = True


OPS: dict[str, Op] = {}


def register_op(name: str, forward, backward, deterministic: bool = True) -> None:
    OPS[name] = Op(forward, backward, deterministic)


@dataclass(eq=False)
class Node:
    graph: "Graph"
    id: int
    op: str  # "leaf" / "param" or a key of OPS
    parents: tuple[int, ...] = ()
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    name: str | None = None

    @property
    def shape(self):
        return None if self.value is None else self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


def _coerce(value) -> np.ndarray:
    dtype = np.asarray(value).dtype
    return T.as_tensor(value, dtype=dtype if dtype in T.DTYPES else np.float64)


class Graph:
    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, int] = {}
        self._inputs: dict[str, int] = {}
        self._leaf_grads: dict[int, np.ndarray] = {}

    # -- construction ---------------------------------------------------------

    def _leaf(self, kind, value, name):
        if value is not None:
            value = _coerce(value)
        node = Node(self, len(self.nodes), kind, value=value, name=name)
        self.nodes.append(node)
        return node

    def input(self, name: str | None = None, value=None) -> Node:
        """A non-trainable leaf; named inputs can be rebound in :meth:`forward`."""
        node = self._leaf("leaf", value, name)
        if name is not None:
            self._inputs[name] = node.id
        return node

    def constant(self, value) -> Node:
        return self._leaf("leaf", value, None)

    def param(self, value, name: str) -> Node:
        if name in self.params:
            raise GraphError(f"duplicate parameter name {name!r}")
        node = self._leaf("param", value, name)
        self.params[name] = node.id
        return node

    def apply(self, op: str, *parents: Node, **attrs) -> Node:
        if op not in OPS:
            raise GraphError(f"unknown op {op!r}")
        for p in parents:
            if p.graph is not self:
                raise GraphError("parents belong to a different graph")
        node = Node(self, len(self.nodes), op, tuple(p.id for p in parents), attrs)
        self.nodes.append(node)
        if all(p.value is not None for p in parents):
            node.value = OPS[op].forward(*(p.value for p in parents), **attrs)
        return node

    # -- evaluation -----------------------------------------------------------

    def forward(self, inputs: dict | None = None, root: Node | None = None) -> np.ndarray:
        """Rebind named inputs/params and recompute every non-leaf node in tape order."""
        for name, value in (inputs or {}).items():
            nid = self._inputs.get(name, self.params.get(name))
            if nid is None:
                raise GraphError(f"no leaf named {name!r}")
            self.nodes[nid].value = _coerce(value)
        for node in self.nodes:
            if node.op in ("leaf", "param"):
                if node.value is None:
                    raise UnboundLeafError(f"leaf {node.name or node.id!r} has no value")
                continue
            vals = [self.nodes[p].value for p in node.parents]
            node.value = OPS[node.op].forward(*vals, **node.attrs)
        return (root or self.nodes[-1]).value

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        """Gradient of a scalar ``loss`` w.r.t. every parameter (zeros where unreachable)."""
        if loss.value is None:
            raise GraphError("run forward before backward")
        if any(d != 1 for d in loss.value.shape):
            raise GraphError(f"loss must be scalar-valued, got shape {loss.value.shape}")
        grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads.pop(node.id, None) if node.op not in ("leaf", "param") else None
            if g is None:
                continue
            vals = [self.nodes[p].value for p in node.parents]
            pgrads = OPS[node.op].backward(g, vals, node.value, **node.attrs)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
        self._leaf_grads = {
            nid: g for nid, g in grads.items() if self.nodes[nid].op in ("leaf", "param")
        }
        out = {}
        for name, nid in self.params.items():
            g = self._leaf_grads.get(nid)
            out[name] = np.zeros_like(self.nodes[nid].value) if g is None else g
        return out

    def grad(self, node: Node) -> np.ndarray:
        """Gradient of the last backward pass w.r.t. any leaf."""
        g = self._leaf_grads.get(node.id)
        return np.zeros_like(node.value) if g is None else g


# -- graph helpers ---------------------------------------------------------------

def _nodes(*xs):
    graph = next((x.graph for x in xs if isinstance(x, Node)), None) or Graph()
    return [x if isinstance(x, Node) or x is None else graph.constant(x) for x in xs]


def _op(name, *xs, **attrs):
    nodes = _nodes(*xs)
    return nodes[0].graph.apply(name, *[n for n in nodes if n is not None], **attrs)


# -- differentiable ops ----------------------------------------------------------

register_op(
    "concat_channels",
    T.concat_channels,
    lambda g, v, out: T.split_channels(g, v[0].shape[1]),
)
register_op(
    "spatial_softmax",
    T.spatial_softmax,
    lambda g, v, out: (T.spatial_softmax_grad(out, g),),
)
register_op(
    "broadcast_gate",
    T.broadcast_gate,
    lambda g, v, out: T.broadcast_gate_grad(v[0], v[1], g),
)


def _conv_fwd(x, w, b=None, stride=1, pad=0):
    return T.conv2d(x, w, b, stride, pad)


def _conv_bwd(g, v, out, stride=1, pad=0):
    dx, dw, db = T.conv2d_grad(v[0], v[1], g, stride, pad, with_bias=len(v) == 3)
    return (dx, dw) if db is None else (dx, dw, db)


register_op("conv2d", _conv_fwd, _conv_bwd)
register_op("add", T.add, lambda g, v, out: (g, g))
register_op("mul", T.mul, lambda g, v, out: (g * v[1], g * v[0]))
register_op(
    "scale",
    lambda x, c: T.scale_by_scalar(x, c),
    lambda g, v, out, c: (T.scale_by_scalar(g, c),),
)


def _scalar_mul_fwd(x, s):
    if s.size != 1:
        raise T.ShapeError(f"scalar_mul needs a 1-element scale, got {s.shape}")
    return x * s.reshape(())


register_op(
    "scalar_mul",
    _scalar_mul_fwd,
    lambda g, v, out: (g * v[1].reshape(()), np.sum(g * v[0]).reshape(v[1].shape)),
)
register_op("relu", T.relu, lambda g, v, out: (T.relu_grad(v[0], g),))
register_op("avgpool2x2", T.avgpool2x2, lambda g, v, out: (T.avgpool2x2_grad(g),))
register_op(
    "global_avgpool",
    T.global_avgpool,
    lambda g, v, out: (T.global_avgpool_grad(v[0].shape, g),),
)
register_op(
    "upsample_nearest_2x",
    T.upsample_nearest_2x,
    lambda g, v, out: (T.upsample_nearest_2x_grad(g),),
)


def _linear_bwd(g, v, out):
    x, w = v[0], v[1]
    grads = (g @ w, g.T @ x)
    return grads + (g.sum(axis=0),) if len(v) == 3 else grads


register_op("linear", lambda x, w, b=None: T.matvec(x, w, b), _linear_bwd)
register_op(
    "total",
    lambda x: np.sum(x).reshape(1).astype(x.dtype),
    lambda g, v, out: (np.broadcast_to(g.reshape(()), v[0].shape).astype(v[0].dtype),),
)
register_op(
    "mean",
    lambda x: np.mean(x).reshape(1).astype(x.dtype),
    lambda g, v, out: (np.broadcast_to(g.reshape(()) / v[0].size, v[0].shape).astype(v[0].dtype),),
)


def _bn_train_fwd(x, gamma, beta, eps=1e-5):
    mu, var = T.channel_stats(x)
    scale_ = (gamma / np.sqrt(var + eps)).astype(x.dtype)
    return (x - mu.reshape(1, -1, 1, 1)) * scale_.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)


def _bn_train_bwd(g, v, out, eps=1e-5):
    x, gamma = v[0], v[1]
    mu, var = T.channel_stats(x)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    m = x.shape[0] * x.shape[2] * x.shape[3]
    dbeta = np.einsum("nchw->c", g)
    dgamma = np.einsum("nchw,nchw->c", g, xhat)
    dx = (gamma * inv / m).reshape(1, -1, 1, 1) * (
        m * g - dbeta.reshape(1, -1, 1, 1) - xhat * dgamma.reshape(1, -1, 1, 1)
    )
    return dx.astype(x.dtype), dgamma, dbeta


register_op("batchnorm_train", _bn_train_fwd, _bn_train_bwd)


def _bn_eval_fwd(x, gamma, beta, mean, var, eps=1e-5):
    scale_ = (gamma / np.sqrt(var + eps)).reshape(1, -1, 1, 1)
    return (x - mean.reshape(1, -1, 1, 1)) * scale_ + beta.reshape(1, -1, 1, 1)


def _bn_eval_bwd(g, v, out, eps=1e-5):
    x, gamma, _, mean, var = v
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
    dx = g * (gamma * inv).reshape(1, -1, 1, 1)
    return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)), None, None


register_op("batchnorm_eval", _bn_eval_fwd, _bn_eval_bwd)


def _log_softmax(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _xent_fwd(logits, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError(f"labels must lie in [0, {logits.shape[1]})")
    lp = _log_softmax(logits)
    return (-lp[np.arange(len(labels)), labels].mean()).reshape(1).astype(logits.dtype)


def _xent_bwd(g, v, out, labels):
    logits = v[0]
    p = np.exp(_log_softmax(logits))
    p[np.arange(len(labels)), labels] -= 1
    return (p * (g.reshape(()) / len(labels)),)


register_op("cross_entropy", _xent_fwd, _xent_bwd)


def concat_channels(x, y):
    return _op("concat_channels", x, y)


def spatial_softmax(m):
    return _op("spatial_softmax", m)


def broadcast_gate(x, s):
    return _op("broadcast_gate", x, s)


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0):
    return _op("conv2d", x, w, b, stride=stride, pad=pad)


def add(a, b):
    return _op("add", a, b)


def mul(a, b):
    return _op("mul", a, b)


def scale(x, c: float):
    return _op("scale", x, c=float(c))


def scalar_mul(x, s):
    """``x`` times a learnable 1-element tensor ``s``."""
    return _op("scalar_mul", x, s)


def relu(x):
    return _op("relu", x)


def avgpool2x2(x):
    return _op("avgpool2x2", x)


def global_avgpool(x):
    return _op("global_avgpool", x)


def upsample_nearest_2x(x):
    return _op("upsample_nearest_2x", x)


def linear(x, w, b=None):
    return _op("linear", x, w, b)


def total(x):
    return _op("total", x)


def mean(x):
    return _op("mean", x)


def batchnorm_train(x, gamma, beta, eps: float = 1e-5):
    return _op("batchnorm_train", x, gamma, beta, eps=eps)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps: float = 1e-5):
    return _op("batchnorm_eval", x, gamma, beta, running_mean, running_var, eps=eps)


def cross_entropy(logits, labels):
    return _op("cross_entropy", logits, labels=np.asarray(labels, dtype=np.int64))


# -- finite-difference checking --------------------------------------------------

@dataclass
class GradcheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e < self.tol for e in self.errors.values())

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def rows(self):
        return [(name, err, err < self.tol) for name, err in self.errors.items()]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param", "max_rel_err", "pass"])
        for name, err, ok in self.rows():
            w.writerow([name, f"{err:.6e}", int(ok)])
        return buf.getvalue()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a - n| normalised by the larger of 1e-8 and max|a| + max|n|."""
    diff = float(np.max(np.abs(analytic - numeric)))
    scale_ = float(np.max(np.abs(analytic)) + np.max(np.abs(numeric)))
    return diff / max(1e-8, scale_)


def numeric_gradients(graph: Graph, loss: Node, eps: float) -> dict[str, np.ndarray]:
    """Central differences of ``loss`` w.r.t. every parameter of ``graph``."""
    out = {}
    for name, nid in graph.params.items():
        theta = graph.nodes[nid].value
        num = np.zeros_like(theta)
        flat, nflat = theta.reshape(-1), num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(graph.forward(root=loss)[0])
            flat[i] = orig - eps
            fm = float(graph.forward(root=loss)[0])
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        out[name] = num
    graph.forward(root=loss)
    return out


def gradcheck(graph: Graph, loss: Node, eps: float = 1e-5, tol: float = 1e-5,
              allow_coarse_eps: bool = False) -> GradcheckReport:
    """Compare backward() against central differences for every parameter.

    ``eps`` outside [1e-7, 1e-3] is rejected unless ``allow_coarse_eps`` is set,
    which exists only to demonstrate step-size sensitivity.
    """
    if not allow_coarse_eps and not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    bad = sorted({n.op for n in graph.nodes if n.op in OPS and not OPS[n.op].deterministic})
    if bad:
        raise GraphError(f"nondeterministic ops cannot be gradchecked: {bad}")
    for name, nid in graph.params.items():
        if graph.nodes[nid].value.dtype != np.float64:
            raise TypeError(f"gradcheck needs float64 parameters; {name!r} is {graph.nodes[nid].value.dtype}")
    first = graph.forward(root=loss).copy()
    if not np.array_equal(first, graph.forward(root=loss)):
        raise GraphError("graph is not deterministic under replay")
    analytic = graph.backward(loss)
    numeric = numeric_gradients(graph, loss, eps)
    return GradcheckReport({k: relative_error(analytic[k], numeric[k]) for k in analytic}, tol)
