"""Run directories: everything needed to inspect or re-score a finished run.

Layout::

    config.json                 training config plus the data source
    loss_log.csv                step, task, loss_cl, loss_ird, lr, replay_flag
    rmatrix.csv
    metrics.json
    checkpoints/encoder_task{i}.json
    buffer/                     exemplars.jsonl + manifest.json
    embeddings/task{i}.npy      optional dumps, with task{i}_labels.csv
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import BENCHMARK_DATA, TaskSequence, gen_synthetic_tasks, load_manifest
from .encoder import EncoderState, encode_batch
from .memory import MemoryBuffer
from .metrics import MetricsReport, RMatrix
from .trainer import RunConfig, RunState, TrainingAborted, run_sequence

SYNTHETIC_KEYS = ("n_tasks", "labels_per_task", "train_per_label", "test_per_label", "vocab_size",
                  "noise_rate", "concentration", "pool_size", "seed")


def build_sequence(source: dict, run_seed: int) -> TaskSequence:
    """``source`` is ``{"manifest": path}`` or ``{"synthetic": {...}}``.

    A synthetic source without its own ``seed`` draws its data from the run seed.
    """
    if ("manifest" in source) == ("synthetic" in source):
        raise ValueError("data source needs exactly one of 'manifest' or 'synthetic'")
    if "manifest" in source:
        return load_manifest(source["manifest"])
    spec = {**BENCHMARK_DATA, **source["synthetic"]}
    unknown = set(spec) - set(SYNTHETIC_KEYS)
    if unknown:
        raise ValueError(f"unknown synthetic keys: {sorted(unknown)}")
    seed = spec.pop("seed", run_seed)
    return gen_synthetic_tasks(seed=seed, **spec)


def loss_log_csv(state: RunState) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "task", "loss_cl", "loss_ird", "lr", "replay_flag"])
    for r in state.loss_log:
        w.writerow([r.step, r.task, repr(r.loss_cl), "" if r.loss_ird is None else repr(r.loss_ird),
                    repr(r.lr), int(r.replay)])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def execute(seq: TaskSequence, cfg: RunConfig, source: dict, out_dir) -> tuple[RunState, MetricsReport]:
    """Run one seed, writing the run directory as tasks complete.

    On abort the loss log so far is kept alongside an ``ABORTED`` note.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps({"train": cfg.to_dict(), "data": source}, indent=2, sort_keys=True))
    (out / "checkpoints").mkdir(exist_ok=True)

    def checkpoint(state: RunState, task) -> None:
        state.encoder.save(out / "checkpoints" / f"encoder_task{task.task_id}.json")

    try:
        state, report = run_sequence(seq, cfg, on_task_end=checkpoint)
    except TrainingAborted as e:
        if e.state is not None:
            _write(out / "loss_log.csv", loss_log_csv(e.state))
            _write(out / "rmatrix.csv", e.state.rmatrix.to_csv())
        _write(out / "ABORTED", f"{e}\n")
        raise
    _write(out / "loss_log.csv", loss_log_csv(state))
    _write(out / "rmatrix.csv", state.rmatrix.to_csv())
    report.save(out / "metrics.json")
    state.buffer.save(out / "buffer")
    return state, report


@dataclass
class LoadedRun:
    path: Path
    cfg: RunConfig
    source: dict
    seq: TaskSequence
    encoder: EncoderState
    buffer: MemoryBuffer
    report: MetricsReport
    rmatrix: RMatrix


def load_run(run_dir) -> LoadedRun:
    path = Path(run_dir)
    if not (path / "metrics.json").is_file():
        raise FileNotFoundError(f"{path} is not a completed run directory")
    conf = json.loads((path / "config.json").read_text())
    cfg = RunConfig.from_dict(conf["train"])
    seq = build_sequence(conf["data"], cfg.seed)
    final = seq.tasks[-1].task_id
    return LoadedRun(
        path=path,
        cfg=cfg,
        source=conf["data"],
        seq=seq,
        encoder=EncoderState.load(path / "checkpoints" / f"encoder_task{final}.json"),
        buffer=MemoryBuffer.load(path / "buffer"),
        report=MetricsReport.from_json((path / "metrics.json").read_text()),
        rmatrix=RMatrix.from_csv((path / "rmatrix.csv").read_text()),
    )


def dump_embeddings(run: LoadedRun, task_id: int, out_dir=None) -> tuple[Path, Path]:
    """Final-model representations of a task's test split followed by its exemplars."""
    task = run.seq.task(task_id)
    rows = [("test", ex) for ex in task.test] + [("exemplar", ex) for ex in run.buffer.task(task_id)]
    reps = encode_batch(run.encoder, [ex for _, ex in rows]).value
    out = Path(out_dir) if out_dir is not None else run.path / "embeddings"
    out.mkdir(parents=True, exist_ok=True)
    npy = out / f"task{task_id}.npy"
    with open(npy, "wb") as fh:
        np.save(fh, np.ascontiguousarray(reps, dtype=np.float64))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["row", "id", "label", "source"])
    for i, (src, ex) in enumerate(rows):
        w.writerow([i, ex.id, ex.label, src])
    labels = out / f"task{task_id}_labels.csv"
    labels.write_text(buf.getvalue())
    return npy, labels
