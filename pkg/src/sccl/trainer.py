"""Sequential task training with distillation, replay and exemplar selection."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .data import Example, TaskSequence, TaskSpec, batch_iter
from .encoder import EncoderSnapshot, EncoderState, HashingConfig, encode_batch, snapshot
from .knn import evaluate_task
from .losses import IRD_SCALES, LinearHead, TemperatureConfig, ce_head_loss, supcon_loss, total_loss
from .memory import MemoryBuffer, replay_batch
from .metrics import MetricsReport, RMatrix
from .selector import select_samples

log = logging.getLogger(__name__)

MODES = ("sccl", "sccl_no_mr", "sccl_no_ird", "cl_only", "ce_baseline")
IRD_MODES = {"sccl", "sccl_no_mr"}
REPLAY_MODES = {"sccl", "sccl_no_ird"}

# The default hyperparameters barely move a randomly initialised encoder in the ~50
# steps per task of the small synthetic benchmark, so that benchmark trains
# with a larger step size and replays more often.
BENCHMARK_OVERRIDES = {"base_lr": 3e-3, "replay_freq": 10}


class TrainingAborted(RuntimeError):
    state: "RunState | None" = None


@dataclass(frozen=True)
class RunConfig:
    mode: str = "sccl"
    batch_size: int = 96
    epochs: int = 10
    base_lr: float = 3e-5
    replay_freq: int = 100
    memory_per_task: int = 200
    temperatures: TemperatureConfig = field(default_factory=TemperatureConfig)
    k: int = 10
    clusters_per_label: int = 4
    seed: int = 0
    hash_dim: int = 1024
    ngram_min: int = 1
    ngram_max: int = 2
    hidden: tuple[int, ...] = (256,)
    out_dim: int = 128
    ird_scale: str = "anchor_sum"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        for name in ("batch_size", "epochs", "replay_freq", "memory_per_task", "k", "clusters_per_label",
                     "hash_dim", "out_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.ird_scale not in IRD_SCALES:
            raise ValueError(f"ird_scale must be one of {IRD_SCALES}")
        if self.base_lr <= 0:
            raise ValueError("base_lr must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "temperatures" in d and isinstance(d["temperatures"], dict):
            d["temperatures"] = TemperatureConfig(**d["temperatures"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_(self, **changes) -> "RunConfig":
        return replace(self, **changes)


@dataclass
class LossRecord:
    step: int
    task: int
    loss_cl: float
    loss_ird: float | None
    lr: float
    replay: bool


@dataclass
class RunState:
    encoder: EncoderState
    buffer: MemoryBuffer
    rmatrix: RMatrix
    prev_snapshot: EncoderSnapshot | None = None
    optimizer: dc.AdamState | None = None
    heads: dict[int, LinearHead] = field(default_factory=dict)
    seen: list[TaskSpec] = field(default_factory=list)
    steps: int = 0
    replay_steps: int = 0
    loss_log: list[LossRecord] = field(default_factory=list)
    replay_at: list[tuple[int, int]] = field(default_factory=list)
    snapshots: list[EncoderSnapshot] = field(default_factory=list)

    @property
    def optimizer_updates(self) -> int:
        return self.steps + self.replay_steps


def benchmark_config(mode: str = "sccl", seed: int = 0, **changes) -> RunConfig:
    return RunConfig(mode=mode, seed=seed, **{**BENCHMARK_OVERRIDES, **changes})


def init_state(cfg: RunConfig, n_tasks: int) -> RunState:
    hashing = HashingConfig(dim=cfg.hash_dim, ngram_min=cfg.ngram_min, ngram_max=cfg.ngram_max)
    enc = EncoderState.init(hashing, cfg.hidden, cfg.out_dim, seed=cfg.seed)
    return RunState(encoder=enc, buffer=MemoryBuffer(), rmatrix=RMatrix(n_tasks))


def replay_schedule(total_steps: int, freq: int) -> list[int]:
    """Current-task steps (1-based) after which a replay update runs."""
    return [t for t in range(1, total_steps + 1) if t % freq == 0]


def _check_finite(value: float, what: str, task: int, t: int) -> None:
    if not math.isfinite(value):
        raise TrainingAborted(f"non-finite {what} at task {task}, step {t}")


def _update(state: RunState, tape: dc.Tape, params: dict[str, np.ndarray], lr: float, task: int, t: int) -> None:
    grads = {name: tape.grad_of(p) for name, p in params.items()}
    try:
        dc.adam_step(params, grads, state.optimizer, lr)
    except dc.NonFiniteError as e:
        raise TrainingAborted(f"task {task}, step {t}: {e}") from e


def train_task(state: RunState, task: TaskSpec, cfg: RunConfig) -> RunState:
    if any(t.task_id == task.task_id for t in state.seen):
        raise ValueError(f"task {task.task_id} was already trained in this run")
    batches = [b for epoch in range(cfg.epochs) for b in batch_iter(task, cfg.batch_size, cfg.seed, epoch)]
    total = len(batches)
    state.optimizer = dc.AdamState(lr=cfg.base_lr)
    params = state.encoder.parameters()

    head = None
    if cfg.mode == "ce_baseline":
        head = LinearHead.init(task.labels, state.encoder.out_dim, seed=cfg.seed * 7919 + task.task_id)
        state.heads[task.task_id] = head
        params = {**params, **head.parameters()}

    use_ird = cfg.mode in IRD_MODES and state.prev_snapshot is not None
    prev = state.prev_snapshot if use_ird else None
    prev_digest = prev.digest if prev is not None else None
    replay_on = cfg.mode in REPLAY_MODES

    for t, batch in enumerate(batches, start=1):
        lr = dc.linear_lr(cfg.base_lr, t - 1, total)
        tape = dc.Tape()
        if head is not None:
            reps = encode_batch(state.encoder, batch, tape)
            loss = ce_head_loss(reps, [ex.label for ex in batch], head, tape)
            cl_val, ird_val = loss.item(), None
        else:
            if len(batch) < 2:
                continue
            parts = total_loss(state.encoder, batch, prev, cfg.temperatures, tape, cfg.ird_scale)
            loss, cl_val, ird_val = parts.total, parts.cl, parts.ird
        _check_finite(loss.item(), "loss", task.task_id, t)
        tape.backward(loss)
        _update(state, tape, params, lr, task.task_id, t)
        state.steps += 1
        state.loss_log.append(LossRecord(state.steps, task.task_id, cl_val, ird_val, lr, False))

        if replay_on and t % cfg.replay_freq == 0 and len(state.buffer) > 0:
            _replay(state, cfg, params, lr, task.task_id, t)

    if prev is not None and prev.state.digest() != prev_digest:
        raise TrainingAborted("reference snapshot changed during training")
    return state


def _replay(state: RunState, cfg: RunConfig, params, lr: float, task_id: int, t: int) -> None:
    batch = replay_batch(state.buffer, cfg.batch_size, cfg.seed, state.steps)
    if len(batch) < 2:
        return
    tape = dc.Tape()
    reps = encode_batch(state.encoder, batch, tape)
    loss = supcon_loss(reps, [ex.label for ex in batch], cfg.temperatures.kappa)
    _check_finite(loss.item(), "replay loss", task_id, t)
    tape.backward(loss)
    _update(state, tape, params, lr, task_id, t)
    state.replay_steps += 1
    state.replay_at.append((task_id, t))
    state.loss_log.append(LossRecord(state.steps, task_id, loss.item(), None, lr, True))


def evaluate(state: RunState, task: TaskSpec, cfg: RunConfig, k: int | None = None) -> float:
    if cfg.mode == "ce_baseline":
        head = state.heads[task.task_id]
        if not task.test:
            return 0.0
        preds = head.predict(encode_batch(state.encoder, task.test).value)
        return sum(p == ex.label for p, ex in zip(preds, task.test)) / len(task.test)
    return evaluate_task(state.buffer, task, state.encoder, k or cfg.k, cfg.temperatures.T_infer)


def finish_task(state: RunState, task: TaskSpec, cfg: RunConfig) -> RunState:
    exemplars = select_samples(task, state.encoder, cfg.memory_per_task, cfg.clusters_per_label, cfg.seed)
    state.buffer.add_task_exemplars(task.task_id, exemplars)
    state.prev_snapshot = snapshot(state.encoder)
    state.snapshots.append(state.prev_snapshot)
    state.seen.append(task)
    i = len(state.seen) - 1
    for j, earlier in enumerate(state.seen):
        state.rmatrix.set(i, j, evaluate(state, earlier, cfg))
    log.info("mode=%s task=%d row=%s", cfg.mode, task.task_id,
             " ".join(f"{v:.3f}" for v in state.rmatrix.rows()[i]))
    return state


def make_report(state: RunState, cfg: RunConfig) -> MetricsReport:
    return MetricsReport.from_rmatrix(
        state.rmatrix,
        mode=cfg.mode,
        seed=cfg.seed,
        config_hash=cfg.digest(),
        steps=state.steps,
        replay_steps=state.replay_steps,
        optimizer_updates=state.optimizer_updates,
    )


def run_sequence(seq: TaskSequence, cfg: RunConfig, on_task_end=None) -> tuple[RunState, MetricsReport]:
    """Train every task in order; ``on_task_end(state, task)`` runs after each task is finished.

    A ``TrainingAborted`` raised here carries the partial state as ``.state``.
    """
    state = init_state(cfg, len(seq))
    try:
        for task in seq:
            train_task(state, task, cfg)
            finish_task(state, task, cfg)
            if on_task_end is not None:
                on_task_end(state, task)
    except TrainingAborted as e:
        e.state = state
        raise
    return state, make_report(state, cfg)
