"""kNN inference over re-encoded exemplars."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TaskSpec
from .encoder import EncoderState, encode_batch
from .memory import MemoryBuffer


class NoCriterionError(ValueError):
    pass


@dataclass(frozen=True)
class Criterion:
    reps: np.ndarray
    labels: np.ndarray
    ids: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class Prediction:
    label: int
    probs: dict[int, float]
    neighbors: list[tuple[int, float]]


def build_criterion(buf: MemoryBuffer, task_id: int, encoder: EncoderState) -> Criterion:
    """Encode the task's exemplars with the encoder as it is now."""
    exemplars = buf.task(task_id)
    if not exemplars:
        raise NoCriterionError(f"task {task_id} has no exemplars")
    reps = encode_batch(encoder, exemplars).value
    return Criterion(reps, np.array([ex.label for ex in exemplars]), np.array([ex.id for ex in exemplars]))


def _vote(sims: np.ndarray, labels: np.ndarray, T: float) -> tuple[int, dict[int, float]]:
    # Shifting by the max similarity leaves the normalised distribution unchanged.
    w = np.exp((sims - sims.max()) / T)
    scores: dict[int, float] = {}
    for lab, wi in zip(labels.tolist(), w.tolist()):
        scores[lab] = scores.get(lab, 0.0) + wi
    z = sum(scores.values())
    probs = {lab: s / z for lab, s in sorted(scores.items())}
    best = max(probs.items(), key=lambda kv: (kv[1], -kv[0]))[0]
    return best, probs


def _top_k(sims: np.ndarray, ids: np.ndarray, k: int) -> np.ndarray:
    # Descending similarity; ties broken by ascending exemplar id.
    return np.lexsort((ids, -sims))[:k]


def knn_predict(query_rep, criterion: Criterion, k: int = 10, T: float = 5.0) -> Prediction:
    if len(criterion) == 0:
        raise NoCriterionError("empty criterion")
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(criterion))
    sims = criterion.reps @ np.asarray(query_rep, dtype=np.float64).ravel()
    top = _top_k(sims, criterion.ids, k)
    label, probs = _vote(sims[top], criterion.labels[top], T)
    return Prediction(label, probs, [(int(criterion.ids[i]), float(sims[i])) for i in top])


def predict_batch(query_reps: np.ndarray, criterion: Criterion, k: int = 10, T: float = 5.0) -> list[int]:
    if len(criterion) == 0:
        raise NoCriterionError("empty criterion")
    k = min(k, len(criterion))
    sims_all = np.asarray(query_reps) @ criterion.reps.T
    out = []
    for sims in sims_all:
        top = _top_k(sims, criterion.ids, k)
        out.append(_vote(sims[top], criterion.labels[top], T)[0])
    return out


def evaluate_task(buf: MemoryBuffer, task: TaskSpec, encoder: EncoderState, k: int = 10, T: float = 5.0) -> float:
    """Accuracy on the task's test split, retrieving only among that task's exemplars."""
    if not task.test:
        return 0.0
    criterion = build_criterion(buf, task.task_id, encoder)
    queries = encode_batch(encoder, task.test).value
    preds = predict_batch(queries, criterion, k, T)
    return sum(p == ex.label for p, ex in zip(preds, task.test)) / len(task.test)
