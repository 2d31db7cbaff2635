"""Accuracy matrix bookkeeping, ACC and BWT."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path


class MetricStateError(ValueError):
    pass


class NotApplicable(MetricStateError):
    """BWT is undefined for a single task."""


class RMatrix:
    """R[i][j]: accuracy of the model after task i on task j's test set (j <= i), 0-based."""

    def __init__(self, n: int):
        if n < 1:
            raise ValueError("need at least one task")
        self.n = n
        self._rows: list[list[float | None]] = [[None] * (i + 1) for i in range(n)]

    @classmethod
    def from_rows(cls, rows) -> "RMatrix":
        r = cls(len(rows))
        for i, row in enumerate(rows):
            for j, v in enumerate(row):
                if v is not None:
                    r.set(i, j, v)
        return r

    def set(self, i: int, j: int, value: float) -> None:
        if not 0 <= j <= i < self.n:
            raise IndexError(f"R[{i}][{j}] outside the lower triangle of a {self.n}-task matrix")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._rows[i][j] = float(value)

    def get(self, i: int, j: int) -> float | None:
        return self._rows[i][j]

    def filled(self) -> int:
        return sum(v is not None for row in self._rows for v in row)

    def rows(self) -> list[list[float | None]]:
        return [list(r) for r in self._rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["after_task", *[f"task_{j}" for j in range(self.n)]])
        for i, row in enumerate(self._rows):
            cells = ["" if v is None else repr(v) for v in row]
            w.writerow([i, *cells, *[""] * (self.n - len(row))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        return cls.from_rows([[float(c) if c else None for c in row[1:i + 2]] for i, row in enumerate(rows)])


def acc(R: RMatrix) -> float:
    bottom = R.rows()[-1]
    if any(v is None for v in bottom):
        raise MetricStateError("final row of the accuracy matrix is incomplete")
    return math.fsum(bottom) / R.n


def bwt(R: RMatrix) -> float:
    if R.n < 2:
        raise NotApplicable("BWT needs at least two tasks")
    rows = R.rows()
    diffs = []
    for i in range(R.n - 1):
        final, diag = rows[-1][i], rows[i][i]
        if final is None or diag is None:
            raise MetricStateError(f"missing R[{R.n - 1}][{i}] or R[{i}][{i}]")
        diffs.append(final - diag)
    return math.fsum(diffs) / (R.n - 1)


@dataclass
class MetricsReport:
    acc: float
    bwt: float | None
    final_accuracies: list[float]
    mode: str
    seed: int
    config_hash: str
    rmatrix: list[list[float | None]] = field(default_factory=list)
    steps: int = 0
    replay_steps: int = 0
    optimizer_updates: int = 0

    @classmethod
    def from_rmatrix(cls, R: RMatrix, **meta) -> "MetricsReport":
        try:
            b = bwt(R)
        except NotApplicable:
            b = None
        return cls(acc=acc(R), bwt=b, final_accuracies=list(R.rows()[-1]), rmatrix=R.rows(), **meta)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls(**json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def knn_sweep(state, seq, k_values, T: float = 5.0) -> list[dict]:
    """Re-score every task under each k with the final encoder and buffer; no training."""
    from .knn import evaluate_task

    smallest = min(len(state.buffer.task(t.task_id)) for t in seq)
    rows = []
    for k in k_values:
        accs = [evaluate_task(state.buffer, t, state.encoder, k, T) for t in seq]
        rows.append({"k": int(k), "acc": math.fsum(accs) / len(accs), "clamped": k > smallest})
    return rows


def sweep_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "acc", "clamped"])
    for r in rows:
        w.writerow([r["k"], repr(r["acc"]), int(r["clamped"])])
    return buf.getvalue()
