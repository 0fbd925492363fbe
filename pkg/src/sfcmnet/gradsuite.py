"""Randomised finite-difference checks for every differentiable op.

Each case builds a small float64 graph from a seeded generator and reduces the
op's output to a scalar with a fixed random weighting, so every output element
contributes to the checked gradient.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from sfcmnet import autograd as ag
from sfcmnet.sfcm import connect


def _weighted_sum(g: ag.Graph, out: ag.Node, rng) -> ag.Node:
    r = g.constant(rng.standard_normal(out.shape))
    return ag.total(ag.mul(out, r))


def _away_from_zero(rng, shape, low=0.1):
    return rng.uniform(low, 1.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _nchw(rng, n=None, c=None, h=None, w=None):
    n = n or int(rng.integers(1, 3))
    c = c or int(rng.integers(1, 4))
    h = h or int(rng.integers(2, 5))
    w = w or int(rng.integers(2, 5))
    return n, c, h, w


def _case_concat(g, rng):
    n, c, h, w = _nchw(rng)
    x = g.param(rng.standard_normal((n, c, h, w)), "x")
    y = g.param(rng.standard_normal((n, int(rng.integers(1, 4)), h, w)), "y")
    return ag.concat_channels(x, y)


def _case_softmax(g, rng):
    n, _, h, w = _nchw(rng)
    return ag.spatial_softmax(g.param(2 * rng.standard_normal((n, 1, h, w)), "m"))


def _case_gate(g, rng):
    n, c, h, w = _nchw(rng)
    x = g.param(rng.standard_normal((n, c, h, w)), "x")
    s = g.param(rng.random((n, 1, h, w)), "s")
    return ag.broadcast_gate(x, s)


def _case_conv(g, rng):
    k = int(rng.choice([1, 3]))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, k // 2 + 1))
    n, c, h, w = _nchw(rng, h=int(rng.integers(3, 6)), w=int(rng.integers(3, 6)))
    x = g.param(rng.standard_normal((n, c, h, w)), "x")
    wt = g.param(rng.standard_normal((int(rng.integers(1, 4)), c, k, k)), "w")
    b = g.param(rng.standard_normal(wt.shape[0]), "b") if rng.random() < 0.5 else None
    return ag.conv2d(x, wt, b, stride=stride, pad=pad)


def _case_add(g, rng):
    shape = _nchw(rng)
    return ag.add(g.param(rng.standard_normal(shape), "a"), g.param(rng.standard_normal(shape), "b"))


def _case_mul(g, rng):
    shape = _nchw(rng)
    return ag.mul(g.param(rng.standard_normal(shape), "a"), g.param(rng.standard_normal(shape), "b"))


def _case_scale(g, rng):
    return ag.scale(g.param(rng.standard_normal(_nchw(rng)), "x"), float(rng.uniform(-2, 2)))


def _case_scalar_mul(g, rng):
    x = g.param(rng.standard_normal(_nchw(rng)), "x")
    return ag.scalar_mul(x, g.param(rng.standard_normal(1), "s"))


def _case_relu(g, rng):
    return ag.relu(g.param(_away_from_zero(rng, _nchw(rng)), "x"))


def _case_avgpool(g, rng):
    n, c, _, _ = _nchw(rng)
    h, w = 2 * int(rng.integers(1, 3)), 2 * int(rng.integers(1, 3))
    return ag.avgpool2x2(g.param(rng.standard_normal((n, c, h, w)), "x"))


def _case_gap(g, rng):
    return ag.global_avgpool(g.param(rng.standard_normal(_nchw(rng)), "x"))


def _case_upsample(g, rng):
    return ag.upsample_nearest_2x(g.param(rng.standard_normal(_nchw(rng)), "x"))


def _case_linear(g, rng):
    n, d, k = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 5))
    x = g.param(rng.standard_normal((n, d)), "x")
    return ag.linear(x, g.param(rng.standard_normal((k, d)), "w"), g.param(rng.standard_normal(k), "b"))


def _case_total(g, rng):
    return ag.total(g.param(rng.standard_normal(_nchw(rng)), "x"))


def _case_mean(g, rng):
    return ag.mean(g.param(rng.standard_normal(_nchw(rng)), "x"))


def _case_bn_train(g, rng):
    n, c, h, w = _nchw(rng, n=2)
    x = g.param(rng.standard_normal((n, c, h, w)), "x")
    gamma = g.param(rng.uniform(0.5, 1.5, c), "gamma")
    return ag.batchnorm_train(x, gamma, g.param(rng.standard_normal(c), "beta"))


def _case_bn_eval(g, rng):
    n, c, h, w = _nchw(rng)
    x = g.param(rng.standard_normal((n, c, h, w)), "x")
    gamma = g.param(rng.uniform(0.5, 1.5, c), "gamma")
    beta = g.param(rng.standard_normal(c), "beta")
    return ag.batchnorm_eval(x, gamma, beta, rng.standard_normal(c), rng.uniform(0.5, 2.0, c))


def _case_xent(g, rng):
    n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    logits = g.param(2 * rng.standard_normal((n, k)), "logits")
    return ag.cross_entropy(logits, rng.integers(0, k, size=n))


def _sfcm_case(mode):
    def case(g, rng):
        n, c1, h, w = _nchw(rng)
        c2 = int(rng.integers(1, 4))
        x = g.param(rng.standard_normal((n, c1, h, w)), "x")
        y = g.param(rng.standard_normal((n, c2, h, w)), "y")
        # b_g is a constant here: the selector ignores it (softmax shift invariance), so its
        # true gradient is exactly zero and a relative error against roundoff is meaningless
        site = {"w_g": g.param(rng.standard_normal((1, c2, 1, 1)), "w_g"),
                "b_g": g.constant(rng.standard_normal(1))}
        if mode == "residual":
            site["w_x"] = g.param(rng.standard_normal(1), "w_x")
        gain = float(h * w) if rng.random() < 0.5 else 1.0
        return connect(x, y, site, mode, selector_gain=gain)
    return case


# name -> (builder, reduce with a random weighting?)
CASES = {
    "concat_channels": (_case_concat, True),
    "spatial_softmax": (_case_softmax, True),
    "broadcast_gate": (_case_gate, True),
    "conv2d": (_case_conv, True),
    "add": (_case_add, True),
    "mul": (_case_mul, True),
    "scale": (_case_scale, True),
    "scalar_mul": (_case_scalar_mul, True),
    "relu": (_case_relu, True),
    "avgpool2x2": (_case_avgpool, True),
    "global_avgpool": (_case_gap, True),
    "upsample_nearest_2x": (_case_upsample, True),
    "linear": (_case_linear, True),
    "total": (_case_total, False),
    "mean": (_case_mean, False),
    "batchnorm_train": (_case_bn_train, True),
    "batchnorm_eval": (_case_bn_eval, True),
    "cross_entropy": (_case_xent, False),
    "sfcm_direct": (_sfcm_case("direct"), True),
    "sfcm_residual": (_sfcm_case("residual"), True),
}


@dataclass
class OpResult:
    op: str
    instances: int
    max_rel_err: float
    failures: int
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0


def check_op(op: str, instances: int = 50, eps: float = 1e-5, tol: float = 1e-5,
             seed: int = 0) -> OpResult:
    if op not in CASES:
        raise KeyError(f"unknown op {op!r}; choose from {', '.join(CASES)}")
    build, weighted = CASES[op]
    worst, failures, t0 = 0.0, 0, time.perf_counter()
    for i in range(instances):
        rng = np.random.default_rng([seed, i, len(op)])
        g = ag.Graph()
        out = build(g, rng)
        loss = _weighted_sum(g, out, rng) if weighted else out
        report = ag.gradcheck(g, loss, eps=eps, tol=tol, allow_coarse_eps=True)
        worst = max(worst, report.max_error)
        failures += not report.passed
    return OpResult(op, instances, worst, failures, time.perf_counter() - t0)


def run_suite(ops=None, instances: int = 50, eps: float = 1e-5, tol: float = 1e-5,
              seed: int = 0) -> list[OpResult]:
    return [check_op(op, instances, eps, tol, seed) for op in (ops or list(CASES))]


def results_csv(results: list[OpResult], tol: float) -> str:
    lines = ["op,instances,max_rel_err,failures,tol,pass"]
    for r in results:
        lines.append(f"{r.op},{r.instances},{r.max_rel_err:.6e},{r.failures},{tol:g},{int(r.passed)}")
    return "\n".join(lines) + "\n"
