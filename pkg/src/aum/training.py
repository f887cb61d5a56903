"""Toy-scale supervised training: losses, augmentation, schedule, Adam,
metrics and the epoch loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace
from typing import Callable

import numpy as np
from scipy.special import expit, log_softmax, softmax

from . import numerics as nx
from .encoder import Model, model_forward
from .features import Spectrogram
from .numerics import Tape, Tensor, record

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss: str = "ce"  # "ce" or "bce"
    multilabel: bool = False
    mixup: float = 0.0
    freqm: int = 0
    timem: int = 0
    base_lr: float = 1e-3
    lr_start: int = 10
    lr_step: int = 5
    lr_decay: float = 0.5
    warmup_steps: int = 0
    epochs: int = 20
    batch_size: int = 12
    seed: int = 0
    weight_decay: float = 5e-7
    beta1: float = 0.95
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self) -> None:
        if self.loss not in ("ce", "bce"):
            raise ValueError(f"loss must be 'ce' or 'bce', got {self.loss!r}")
        if not 0.0 <= self.mixup <= 1.0:
            raise ValueError(f"mixup strength must lie in [0, 1], got {self.mixup}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.freqm < 0 or self.timem < 0:
            raise ValueError("mask widths must be non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.lr_step < 1:
            raise ValueError("batch_size and lr_step must be positive, epochs non-negative")


@dataclass
class Batch:
    spectrograms: np.ndarray  # (B, F, T)
    targets: np.ndarray  # (B, C)


@dataclass
class Dataset:
    spectrograms: np.ndarray  # (N, F, T), already normalized
    targets: np.ndarray  # (N, C) one-hot or multi-hot
    multilabel: bool = False

    def __len__(self) -> int:
        return self.spectrograms.shape[0]

    @classmethod
    def from_labels(cls, spectrograms, labels: list[list[int]], num_classes: int, multilabel: bool = False):
        targets = np.zeros((len(labels), num_classes), dtype=np.float32)
        for i, ids in enumerate(labels):
            for c in ids:
                if not 0 <= c < num_classes:
                    raise ValueError(f"label {c} out of range for {num_classes} classes")
                targets[i, c] = 1.0
        return cls(np.asarray(spectrograms, dtype=np.float32), targets, multilabel)


# ------------------------------------------------------------ augmentation

def spec_augment(s, F_max: int, T_max: int, rng: np.random.Generator, return_mask: bool = False):
    """Mask one frequency band and one time band with the spectrogram mean.

    Band widths are drawn from ``U{0..F_max}`` and ``U{0..T_max}``; start
    offsets uniformly among positions that keep the band inside. Accepts a
    :class:`Spectrogram` or a bare ``(F, T)`` array and returns the same kind.
    """
    values = s.values if isinstance(s, Spectrogram) else np.asarray(s)
    F, T = values.shape
    if F_max > F:
        log.warning("frequency mask %d exceeds %d bins; clamped", F_max, F)
        F_max = F
    if T_max > T:
        log.warning("time mask %d exceeds %d frames; clamped", T_max, T)
        T_max = T
    out = values.copy()
    fill = values.mean()
    wf = int(rng.integers(0, F_max + 1))
    f0 = int(rng.integers(0, F - wf + 1))
    wt = int(rng.integers(0, T_max + 1))
    t0 = int(rng.integers(0, T - wt + 1))
    out[f0 : f0 + wf, :] = fill
    out[:, t0 : t0 + wt] = fill
    result = replace(s, values=out) if isinstance(s, Spectrogram) else out
    if return_mask:
        return result, (f0, wf, t0, wt)
    return result


def mixup(batch: Batch, alpha: float, rng: np.random.Generator, lam=None, perm=None) -> Batch:
    """Blend each sample, with probability ``alpha``, with a random partner.

    The mixing weight is ``0.5 + (1 - alpha) * (u - 0.5)`` with
    ``u ~ U[0, 1]``: uniform for weak mixup, pinned to 0.5 at ``alpha = 1``.
    ``lam`` and ``perm`` override the draws.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return batch
    B = batch.spectrograms.shape[0]
    partner = rng.permutation(B) if perm is None else np.asarray(perm)
    chosen = rng.random(B) < alpha
    if lam is None:
        lam_v = 0.5 + (1.0 - alpha) * (rng.random(B) - 0.5)
    else:
        lam_v = np.broadcast_to(np.asarray(lam, dtype=np.float64), (B,))
    lam_v = np.where(chosen, lam_v, 1.0).astype(np.float32)
    x, y = batch.spectrograms, batch.targets
    lx = lam_v.reshape((B,) + (1,) * (x.ndim - 1))
    ly = lam_v[:, None]
    return Batch(lx * x + (1 - lx) * x[partner], ly * y + (1 - ly) * y[partner])


# ------------------------------------------------------------------ losses

def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Softmax cross-entropy with (possibly soft) targets, batch mean."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise nx.ShapeError(f"targets {y.shape} do not match logits {z.shape}")
    B = z.shape[0]
    logp = log_softmax(z, axis=-1)
    value = -(y * logp).sum() / B

    def backward(g):
        return (g * (softmax(z, axis=-1) * y.sum(-1, keepdims=True) - y) / B,)

    return record(np.asarray(value, dtype=z.dtype), (logits,), backward)


def binary_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Sigmoid cross-entropy averaged over batch and classes."""
    z = logits.data
    y = np.asarray(targets, dtype=z.dtype)
    if y.shape != z.shape:
        raise nx.ShapeError(f"targets {y.shape} do not match logits {z.shape}")
    n = z.size
    value = (np.logaddexp(0, z) - y * z).sum() / n
    return record(np.asarray(value, dtype=z.dtype), (logits,), lambda g: (g * (expit(z) - y) / n,))


def loss(logits: Tensor, targets, kind: str) -> Tensor:
    if kind == "ce":
        return cross_entropy(logits, targets)
    if kind == "bce":
        return binary_cross_entropy(logits, targets)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------- schedule

def lr_at(step: int, epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup over ``warmup_steps``, then step decay.

    Milestones sit at epochs ``lr_start + i * lr_step``; each one reached
    (``epoch >= milestone``) multiplies the base rate by ``lr_decay``.
    """
    if step < cfg.warmup_steps:
        return cfg.base_lr * step / cfg.warmup_steps
    k = 0 if epoch < cfg.lr_start else (epoch - cfg.lr_start) // cfg.lr_step + 1
    return cfg.base_lr * cfg.lr_decay**k


class Adam:
    """Adam with decoupled weight decay."""

    def __init__(self, params: dict[str, Tensor], beta1=0.95, beta2=0.999, eps=1e-8, weight_decay=5e-7):
        self.params = params
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data -= (lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ----------------------------------------------------------------- metrics

def average_precision(scores, labels) -> float:
    """Mean of precision@k over the ranks k of the positives.

    Scores are sorted descending; ties keep their original order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    if not labels.any():
        raise ValueError("average precision undefined without positives")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    ranks = np.flatnonzero(hits) + 1
    return float((np.arange(1, len(ranks) + 1) / ranks).mean())


def mean_average_precision(scores, targets) -> tuple[float, int]:
    """Unweighted class mean of AP; classes without positives are skipped.

    Returns ``(mAP, number_of_skipped_classes)``.
    """
    scores = np.asarray(scores)
    targets = np.asarray(targets) > 0.5
    aps, skipped = [], 0
    for c in range(scores.shape[1]):
        if not targets[:, c].any():
            skipped += 1
            continue
        aps.append(average_precision(scores[:, c], targets[:, c]))
    return (float(np.mean(aps)) if aps else float("nan")), skipped


def accuracy(scores, targets) -> float:
    """Fraction of rows whose argmax (lowest index on ties) hits the target."""
    pred = np.argmax(np.asarray(scores), axis=1)
    truth = np.argmax(np.asarray(targets), axis=1)
    return float((pred == truth).mean())


@dataclass
class Metrics:
    acc: float
    mAP: float
    skipped_classes: int

    def value(self, task: str) -> float:
        return self.acc if task == "acc" else self.mAP


def predict(model: Model, spectrograms: np.ndarray, batch_size: int = 64) -> np.ndarray:
    out = []
    for s in range(0, len(spectrograms), batch_size):
        out.append(model_forward(spectrograms[s : s + batch_size], model).data)
    return np.concatenate(out, axis=0)


def evaluate(model: Model, dataset: Dataset, task: str = "acc") -> Metrics:
    if task not in ("acc", "map"):
        raise ValueError(f"task must be 'acc' or 'map', got {task!r}")
    scores = predict(model, dataset.spectrograms)
    mAP, skipped = mean_average_precision(scores, dataset.targets)
    if skipped:
        log.info("mAP: %d classes without positives excluded", skipped)
    return Metrics(accuracy(scores, dataset.targets), mAP, skipped)


# ------------------------------------------------------------------- train

@dataclass
class LogRow:
    epoch: int
    step: int
    lr: float
    loss: float
    metric: float


@dataclass
class TrainState:
    epoch: int = 0  # epochs completed
    step: int = 0
    rng_state: dict | None = None
    optimizer: Adam | None = None
    log: list[LogRow] = field(default_factory=list)


def _augment(batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> Batch:
    x = batch.spectrograms
    if cfg.freqm or cfg.timem:
        x = np.stack([spec_augment(s, cfg.freqm, cfg.timem, rng) for s in x])
    return mixup(Batch(x, batch.targets), cfg.mixup, rng)


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    state: TrainState | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Run ``cfg.epochs`` epochs (resuming from ``state`` if given).

    Everything random is drawn from one generator seeded by ``cfg.seed``, so
    two runs with the same seed produce identical weights and logs.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = TrainState(optimizer=Adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay))
    elif state.rng_state is not None:
        rng.bit_generator.state = state.rng_state
    opt = state.optimizer
    task = "map" if dataset.multilabel else "acc"
    n = len(dataset)
    for epoch in range(state.epoch, cfg.epochs):
        order = rng.permutation(n)
        losses = []
        lr = lr_at(state.step, epoch, cfg)
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            batch = _augment(Batch(dataset.spectrograms[idx], dataset.targets[idx]), cfg, rng)
            with Tape() as tape:
                value = loss(model_forward(batch.spectrograms, model), batch.targets, cfg.loss)
            lv = float(value.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss {lv} at epoch {epoch}, step {state.step}")
            tape.backward(value)
            if cfg.grad_clip is not None:
                _clip(params, cfg.grad_clip)
            lr = lr_at(state.step, epoch, cfg)
            opt.step(lr)
            opt.zero_grad()
            state.step += 1
            losses.append(lv)
        metric = evaluate(model, dataset, task).value(task)
        row = LogRow(epoch, state.step, lr, float(np.mean(losses)), metric)
        state.log.append(row)
        state.epoch = epoch + 1
        state.rng_state = rng.bit_generator.state
        log.info("epoch %d step %d lr %.3g loss %.5f %s %.4f", epoch, state.step, lr, row.loss, task, metric)
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def _clip(params: dict[str, Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params.values() if p.grad is not None))
    if total > max_norm:
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * (max_norm / total)


def train_config_fields() -> set[str]:
    return {f.name for f in fields(TrainConfig)}
