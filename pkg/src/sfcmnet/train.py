"""Optimisers, learning-rate schedules, the training loop and evaluation metrics."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from sfcmnet import autograd as ag
from sfcmnet.data import Dataset, augment_batch
from sfcmnet.models import Model

log = logging.getLogger(__name__)


class DivergenceError(FloatingPointError):
    pass


# -- schedules -------------------------------------------------------------------

@dataclass
class StepAtFractions:
    """Divide the base rate by ``divisor`` at each fraction of the epoch budget."""

    total_epochs: int
    fractions: tuple[float, ...] = (0.5, 0.75)
    divisor: float = 10.0

    def __call__(self, base_lr: float, epoch: int, step: int = 0) -> float:
        drops = sum(epoch >= f * self.total_epochs for f in self.fractions)
        return base_lr / self.divisor ** drops


@dataclass
class GeometricEvery:
    """Multiply the base rate by ``factor`` every ``k_steps`` optimiser steps."""

    k_steps: int = 10000
    factor: float = 0.94

    def __call__(self, base_lr: float, epoch: int, step: int = 0) -> float:
        return base_lr * self.factor ** (step // self.k_steps)


@dataclass
class Constant:
    def __call__(self, base_lr: float, epoch: int, step: int = 0) -> float:
        return base_lr


# -- optimisers ------------------------------------------------------------------

def _check_shapes(params, grads):
    for k, p in params.items():
        if k not in grads:
            raise KeyError(f"missing gradient for {k!r}")
        if grads[k].shape != p.shape:
            raise ValueError(f"{k!r}: gradient shape {grads[k].shape} != parameter shape {p.shape}")


@dataclass
class SGD:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: object = field(default_factory=Constant)
    epoch: int = 0
    step_count: int = 0
    velocity: dict = field(default_factory=dict)

    @property
    def current_lr(self) -> float:
        return self.schedule(self.lr, self.epoch, self.step_count)

    def step(self, params: dict, grads: dict) -> None:
        """v <- momentum * v + g;  p <- p - lr * v  (per parameter, no cross terms)."""
        _check_shapes(params, grads)
        lr = self.current_lr
        for k, p in params.items():
            g = grads[k] + self.weight_decay * p if self.weight_decay else grads[k]
            v = self.velocity.get(k)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[k] = v.astype(p.dtype)
            params[k] = (p - lr * self.velocity[k]).astype(p.dtype)
        self.step_count += 1


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: object = field(default_factory=lambda: GeometricEvery(10000, 0.94))
    epoch: int = 0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @property
    def current_lr(self) -> float:
        return self.schedule(self.lr, self.epoch, self.step_count)

    def step(self, params: dict, grads: dict) -> None:
        _check_shapes(params, grads)
        lr = self.current_lr
        t = self.step_count + 1
        c1, c2 = 1 - self.beta1 ** t, 1 - self.beta2 ** t
        for k, p in params.items():
            g = grads[k]
            m = self.beta1 * self.m.get(k, 0) + (1 - self.beta1) * g
            v = self.beta2 * self.v.get(k, 0) + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            params[k] = (p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
        self.step_count = t


def sgd_step(state: SGD, params, grads):
    state.step(params, grads)
    return params, state


def adam_step(state: Adam, params, grads):
    state.step(params, grads)
    return params, state


def make_optimizer(name: str, epochs: int, lr: float | None = None, momentum: float = 0.9,
                   weight_decay: float = 0.0):
    """``sgd`` (step at 50%/75% of ``epochs``) or ``adam`` (x0.94 every 10k steps)."""
    if name == "sgd":
        return SGD(lr if lr is not None else 0.1, momentum, weight_decay, StepAtFractions(epochs))
    if name == "adam":
        return Adam(lr if lr is not None else 1e-3)
    raise ValueError(f"unknown optimizer {name!r}")


# -- metrics -------------------------------------------------------------------

@dataclass
class Metrics:
    loss: float
    accuracy: float
    selector_fg_mass: float = float("nan")
    fg_area_frac: float = float("nan")


def pool_mask(mask: np.ndarray, h: int, w: int) -> np.ndarray:
    """Average-pool a (N,1,H,W) mask down to (N,1,h,w): fraction of foreground per cell."""
    n, _, hh, ww = mask.shape
    fy, fx = hh // h, ww // w
    return mask.reshape(n, 1, h, fy, w, fx).mean(axis=(3, 5))


def selector_mass(selectors, masks: np.ndarray) -> np.ndarray:
    """Per-sample selector probability inside the foreground, averaged over sites."""
    per_site = [np.sum(s * pool_mask(masks, *s.shape[2:]), axis=(1, 2, 3)) for s in selectors]
    return np.mean(per_site, axis=0)


class _Accumulator:
    def __init__(self):
        self.loss = self.correct = self.n = 0.0
        self.mass, self.area, self.n_mass = 0.0, 0.0, 0
        self.with_selectors = False

    def add(self, loss, logits, labels, selectors, masks):
        n = len(labels)
        self.loss += float(loss) * n
        self.correct += int(np.sum(np.argmax(logits, axis=1) == labels))
        self.n += n
        if masks is not None:
            self.area += float(masks.mean(axis=(1, 2, 3)).sum())
            if selectors:
                self.with_selectors = True
                self.mass += float(selector_mass(selectors, masks).sum())
            self.n_mass += n

    def result(self) -> Metrics:
        nan = float("nan")
        return Metrics(
            self.loss / self.n,
            self.correct / self.n,
            self.mass / self.n_mass if self.with_selectors else nan,
            self.area / self.n_mass if self.n_mass else nan,
        )


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, min(n, start + batch_size))


def evaluate(model: Model, ds: Dataset, batch_size: int = 256) -> Metrics:
    """Eval-mode loss/accuracy/selector mass; parameters and state untouched."""
    acc = _Accumulator()
    for sl in _batches(len(ds), batch_size):
        g = ag.Graph()
        x = g.input("x", ds.images[sl])
        logits, sels = model.build(x, model.bind(g, trainable=False), training=False)
        loss = ag.cross_entropy(logits, ds.labels[sl])
        masks = None if ds.masks is None else ds.masks[sl]
        acc.add(loss.value[0], logits.value, ds.labels[sl], [s.value for s in sels], masks)
    return acc.result()


def train_step(model: Model, optimizer, images, labels):
    """One forward/backward/update on a batch; returns (loss, logits, selector arrays)."""
    g = ag.Graph()
    x = g.input("x", images)
    logits, sels = model.build(x, model.bind(g), training=True)
    loss = ag.cross_entropy(logits, labels)
    if not np.isfinite(loss.value[0]):
        raise DivergenceError(f"loss became {loss.value[0]} at step {optimizer.step_count}")
    grads = g.backward(loss)
    optimizer.step(model.params, grads)
    return float(loss.value[0]), logits.value, [s.value for s in sels]


# -- training loop ---------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    selector_fg_mass: float


HISTORY_FIELDS = ("epoch", "split", "loss", "accuracy", "selector_fg_mass")


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTORY_FIELDS)
    for r in history:
        w.writerow([r.epoch, r.split, repr(r.loss), repr(r.accuracy), repr(r.selector_fg_mass)])
    return buf.getvalue()


@dataclass
class TrainResult:
    history: list[EpochRecord]
    model: Model
    val: Dataset | None = None

    def split(self, name: str) -> list[EpochRecord]:
        return [r for r in self.history if r.split == name]


def train_loop(model: Model, dataset: Dataset, optimizer, epochs: int, batch_size: int = 32,
               seed: int = 0, val_frac: float = 0.1, augment: bool = False,
               test: Dataset | None = None) -> TrainResult:
    """Seeded minibatch training with per-epoch train/val (and optional test) metrics.

    The validation split is held out from ``dataset`` by a seeded shuffle.
    ``model.params`` is updated in place; its values after the last epoch are
    the checkpoint.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if val_frac > 0:
        train_ds, val_ds = dataset.split(val_frac, seed)
    else:
        train_ds, val_ds = dataset, None
    rng = np.random.default_rng([seed, 1])
    history: list[EpochRecord] = []
    for epoch in range(epochs):
        optimizer.epoch = epoch
        order = rng.permutation(len(train_ds))
        acc = _Accumulator()
        for sl in _batches(len(order), batch_size):
            idx = order[sl]
            images, labels = train_ds.images[idx], train_ds.labels[idx]
            masks = None if train_ds.masks is None else train_ds.masks[idx]
            if augment:
                images, masks = augment_batch(images, masks, rng)
            loss, logits, sels = train_step(model, optimizer, images, labels)
            acc.add(loss, logits, labels, sels, masks)
        m = acc.result()
        history.append(EpochRecord(epoch + 1, "train", m.loss, m.accuracy, m.selector_fg_mass))
        if math.isnan(m.loss):
            raise DivergenceError(f"NaN training loss in epoch {epoch + 1}")
        for name, ds in (("val", val_ds), ("test", test)):
            if ds is not None and len(ds):
                e = evaluate(model, ds)
                history.append(EpochRecord(epoch + 1, name, e.loss, e.accuracy, e.selector_fg_mass))
        log.info("epoch %d: train loss %.4f acc %.3f (lr %.4g)", epoch + 1, m.loss, m.accuracy,
                 optimizer.current_lr)
    return TrainResult(history, model, val_ds)
