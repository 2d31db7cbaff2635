"""Supervised contrastive loss, instance-wise relation distillation and a CE head."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .encoder import EncoderSnapshot, EncoderState, encode_batch


class InvalidBatchError(ValueError):
    pass


class InvalidLabelError(ValueError):
    pass


class NoPositivesWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class TemperatureConfig:
    kappa: float = 0.2
    tau: float = 0.2
    T_infer: float = 5.0

    def __post_init__(self):
        if min(self.kappa, self.tau, self.T_infer) <= 0:
            raise ValueError("temperatures must be positive")


def _check_batch(reps: dc.Tensor) -> int:
    b = reps.shape[0]
    if b < 2:
        raise InvalidBatchError(f"need at least 2 rows, got {b}")
    return b


def _off_diagonal(b: int) -> np.ndarray:
    return ~np.eye(b, dtype=bool)


def positive_weights(labels: Sequence[int]) -> np.ndarray:
    """W[j, p] = 1/|P(j)| for each positive p of anchor j, 0 elsewhere."""
    y = np.asarray(labels)
    pos = (y[:, None] == y[None, :]) & _off_diagonal(len(y))
    counts = pos.sum(axis=1, keepdims=True)
    return np.divide(pos, counts, out=np.zeros(pos.shape), where=counts > 0)


def supcon_loss(reps: dc.Tensor, labels: Sequence[int], kappa: float = 0.2) -> dc.Tensor:
    """Summed (not averaged) supervised contrastive loss over all anchors.

    Anchors without a positive in the batch contribute nothing.
    """
    b = _check_batch(reps)
    if len(labels) != b:
        raise InvalidBatchError(f"{len(labels)} labels for {b} rows")
    weights = positive_weights(labels)
    if not weights.any():
        warnings.warn("batch has no positive pairs; contrastive loss is 0", NoPositivesWarning, stacklevel=2)
    logits = dc.scale(dc.matmul(reps, dc.transpose(reps)), 1.0 / kappa)
    logp = dc.log_softmax_rows(logits, _off_diagonal(b))
    return dc.scale(dc.sum_all(dc.mul_const(logp, weights)), -1.0)


def _similarity_logits(reps, tau: float) -> dc.Tensor:
    return dc.scale(dc.matmul(reps, dc.transpose(reps)), 1.0 / tau)


def ird_similarity(reps, tau: float = 0.2) -> np.ndarray:
    """Row j holds the softmax over the other B-1 rows (original order, self removed)."""
    reps = dc.Tensor(reps.value if isinstance(reps, dc.Tensor) else reps)
    b = _check_batch(reps)
    mask = _off_diagonal(b)
    full = dc.softmax_rows(_similarity_logits(reps, tau), mask).value
    return full[mask].reshape(b, b - 1)


def ird_loss(cur_reps: dc.Tensor, prev_reps, tau: float = 0.2) -> dc.Tensor:
    """Cross-entropy of current in-batch similarities against the frozen ones, over |A|^2."""
    prev = np.asarray(prev_reps.value if isinstance(prev_reps, dc.Tensor) else prev_reps, dtype=np.float64)
    b = _check_batch(cur_reps)
    if prev.shape != cur_reps.shape:
        raise dc.DimensionError(f"ird_loss: current {cur_reps.shape} vs previous {prev.shape}")
    mask = _off_diagonal(b)
    target = dc.softmax_rows(_similarity_logits(dc.Tensor(prev), tau), mask).value
    logp = dc.log_softmax_rows(_similarity_logits(cur_reps, tau), mask)
    return dc.scale(dc.sum_all(dc.mul_const(logp, target)), -1.0 / (b * b))


IRD_SCALES = ("anchor_sum", "mean")


def ird_weight(batch_size: int, ird_scale: str) -> float:
    if ird_scale == "anchor_sum":
        return float(batch_size * batch_size)
    if ird_scale == "mean":
        return 1.0
    raise ValueError(f"unknown ird_scale {ird_scale!r}; expected one of {IRD_SCALES}")


@dataclass
class LossParts:
    total: dc.Tensor
    cl: float
    ird: float | None


def total_loss(
    encoder: EncoderState,
    batch: Sequence,
    prev_snapshot: EncoderSnapshot | None,
    cfg: TemperatureConfig,
    tape: dc.Tape | None,
    ird_scale: str = "anchor_sum",
) -> LossParts:
    """Contrastive loss, plus distillation when a previous encoder exists.

    ``ird_scale="mean"`` adds ``ird_loss`` as is (averaged over |A|^2).
    ``"anchor_sum"`` multiplies it by |A|^2, so that both terms are sums of
    per-anchor quantities; with the |A|^2 average the distillation gradient is
    roughly |A|^2 times smaller than the contrastive one and has no effect.
    ``LossParts.ird`` reports the term as added.
    """
    reps = encode_batch(encoder, batch, tape)
    labels = [ex.label for ex in batch]
    cl = supcon_loss(reps, labels, cfg.kappa)
    if prev_snapshot is None:
        return LossParts(cl, cl.item(), None)
    ird = ird_loss(reps, prev_snapshot.encode(batch), cfg.tau)
    weight = ird_weight(len(batch), ird_scale)
    return LossParts(dc.add(cl, dc.scale(ird, weight)), cl.item(), ird.item() * weight)


# ------------------------------------------------------------------ CE head


@dataclass
class LinearHead:
    labels: tuple[int, ...]
    weight: np.ndarray
    bias: np.ndarray

    @classmethod
    def init(cls, labels, in_dim: int, seed: int = 0) -> "LinearHead":
        labels = tuple(sorted(labels))
        rng = np.random.default_rng(seed)
        bound = np.sqrt(6.0 / (in_dim + len(labels)))
        return cls(labels, rng.uniform(-bound, bound, size=(in_dim, len(labels))), np.zeros((1, len(labels))))

    def parameters(self, prefix: str = "head") -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}

    def local_index(self, labels: Sequence[int]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.labels)}
        try:
            return np.array([index[c] for c in labels])
        except KeyError as e:
            raise InvalidLabelError(f"label {e.args[0]} is not handled by this head") from None

    def logits(self, reps, tape: dc.Tape | None = None) -> dc.Tensor:
        w, b = (tape.watch(self.weight), tape.watch(self.bias)) if tape is not None else (self.weight, self.bias)
        return dc.add_bias(dc.matmul(reps, w), b)

    def predict(self, reps: np.ndarray) -> list[int]:
        scores = self.logits(dc.Tensor(reps)).value
        return [self.labels[i] for i in np.argmax(scores, axis=1)]


def ce_from_logits(logits: dc.Tensor, targets: np.ndarray) -> dc.Tensor:
    n, c = logits.shape
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    return dc.scale(dc.sum_all(dc.mul_const(dc.log_softmax_rows(logits), onehot)), -1.0 / n)


def ce_head_loss(reps: dc.Tensor, labels: Sequence[int], head: LinearHead, tape: dc.Tape | None = None) -> dc.Tensor:
    """Mean softmax cross-entropy against task-local label indices."""
    targets = head.local_index(labels)
    return ce_from_logits(head.logits(reps, tape), targets)
