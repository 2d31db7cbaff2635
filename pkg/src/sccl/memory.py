"""Per-task exemplar buffer and replay sampling."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import Example, label_blocks, pack_blocks


class BufferStateError(RuntimeError):
    pass


class MemoryBuffer:
    """Append-only store of exemplars keyed by task id."""

    def __init__(self):
        self._tasks: dict[int, tuple[Example, ...]] = {}

    def add_task_exemplars(self, task_id: int, exemplars) -> "MemoryBuffer":
        if task_id in self._tasks:
            raise BufferStateError(f"task {task_id} already has exemplars in the buffer")
        exemplars = tuple(exemplars)
        ids = [ex.id for ex in exemplars]
        if len(set(ids)) != len(ids):
            raise BufferStateError(f"duplicate exemplar ids for task {task_id}")
        if any(ex.task != task_id for ex in exemplars):
            raise BufferStateError(f"exemplar from another task offered for task {task_id}")
        self._tasks[task_id] = exemplars
        return self

    def task(self, task_id: int) -> tuple[Example, ...]:
        try:
            return self._tasks[task_id]
        except KeyError:
            raise KeyError(f"task {task_id} not in memory buffer") from None

    @property
    def task_ids(self) -> list[int]:
        return list(self._tasks)

    def __contains__(self, task_id: int) -> bool:
        return task_id in self._tasks

    def __len__(self) -> int:
        return sum(len(v) for v in self._tasks.values())

    def all(self) -> list[Example]:
        return [ex for exs in self._tasks.values() for ex in exs]

    def counts(self) -> dict[int, int]:
        return {t: len(v) for t, v in self._tasks.items()}

    # ------------------------------------------------------------- persistence

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with (directory / "exemplars.jsonl").open("w", encoding="utf-8") as fh:
            for ex in self.all():
                fh.write(json.dumps(ex.to_record()) + "\n")
        manifest = {"tasks": [{"task": t, "count": n} for t, n in self.counts().items()]}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, directory) -> "MemoryBuffer":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        per_task: dict[int, list[Example]] = {e["task"]: [] for e in manifest["tasks"]}
        with (directory / "exemplars.jsonl").open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    ex = Example.from_record(json.loads(line))
                    per_task[ex.task].append(ex)
        buf = cls()
        for entry in manifest["tasks"]:
            exs = per_task[entry["task"]]
            if len(exs) != entry["count"]:
                raise BufferStateError(f"task {entry['task']}: manifest says {entry['count']}, found {len(exs)}")
            buf.add_task_exemplars(entry["task"], exs)
        return buf


def replay_batch(buf: MemoryBuffer, batch_size: int, seed: int, step: int) -> list[Example]:
    """Label-stratified draw across every buffered task."""
    pool = buf.all()
    if not pool:
        return []
    rng = np.random.default_rng([seed, step])
    blocks = label_blocks(pool, rng)
    if len(pool) <= batch_size:
        return [ex for block in blocks for ex in block]
    return pack_blocks(blocks, batch_size)[0]
