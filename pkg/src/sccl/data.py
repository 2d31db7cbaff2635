"""Examples, tasks, dataset ingestion and label-stratified batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# Global label id = task_id * LABEL_STRIDE + rank of the label name within its file,
# which keeps label spaces disjoint regardless of loading order.
LABEL_STRIDE = 1000
ID_STRIDE = 10_000_000
SPLITS = ("train", "test")


class DatasetError(ValueError):
    pass


class DatasetParseError(DatasetError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.path = path
        self.line_no = line_no


@dataclass(frozen=True)
class Example:
    id: int
    label: int
    task: int
    text: str | None = None
    raw_features: tuple[float, ...] | None = None

    def __post_init__(self):
        if (self.text is None) == (self.raw_features is None):
            raise DatasetError(f"example {self.id}: exactly one of text / raw_features is required")

    def to_record(self) -> dict:
        rec = {"id": self.id, "task": self.task, "label": self.label}
        if self.text is not None:
            rec["text"] = self.text
        else:
            rec["raw_features"] = list(self.raw_features)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "Example":
        raw = rec.get("raw_features")
        return cls(
            id=int(rec["id"]),
            label=int(rec["label"]),
            task=int(rec["task"]),
            text=rec.get("text"),
            raw_features=None if raw is None else tuple(float(x) for x in raw),
        )


@dataclass
class TaskSpec:
    task_id: int
    labels: frozenset[int]
    train: list[Example]
    test: list[Example]
    label_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = frozenset(self.labels)
        if not self.labels:
            raise DatasetError(f"task {self.task_id}: empty label set")
        for ex in (*self.train, *self.test):
            if ex.label not in self.labels:
                raise DatasetError(f"task {self.task_id}: example {ex.id} has label {ex.label} outside the task")
            if ex.task != self.task_id:
                raise DatasetError(f"task {self.task_id}: example {ex.id} belongs to task {ex.task}")

    def by_label(self, split: str = "train") -> dict[int, list[Example]]:
        groups: dict[int, list[Example]] = {c: [] for c in sorted(self.labels)}
        for ex in getattr(self, split):
            groups[ex.label].append(ex)
        return groups


@dataclass
class TaskSequence:
    tasks: list[TaskSpec]
    order_name: str = "default"

    def __post_init__(self):
        if not self.tasks:
            raise DatasetError("a task sequence needs at least one task")
        ids = [t.task_id for t in self.tasks]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"duplicate task ids in {ids}")
        seen: set[int] = set()
        for t in self.tasks:
            if seen & t.labels:
                raise DatasetError(f"task {t.task_id} reuses labels {sorted(seen & t.labels)}")
            seen |= t.labels

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def task(self, task_id: int) -> TaskSpec:
        for t in self.tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"no task {task_id}")


# ------------------------------------------------------------------ ingestion


def load_jsonl(path, task_id: int) -> TaskSpec:
    """Read one task from a JSON Lines file of ``{text, label, split}`` records."""
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(path, line_no, f"invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise DatasetParseError(path, line_no, "record is not an object")
            for key in ("text", "label", "split"):
                if key not in rec:
                    raise DatasetParseError(path, line_no, f"missing field {key!r}")
            if rec["split"] not in SPLITS:
                raise DatasetParseError(path, line_no, f"split must be one of {SPLITS}, got {rec['split']!r}")
            if not isinstance(rec["text"], str):
                raise DatasetParseError(path, line_no, "text must be a string")
            rows.append((line_no, rec["text"], str(rec["label"]), rec["split"]))

    names = sorted({r[2] for r in rows})
    if not names:
        raise DatasetError(f"{path}: empty label set")
    if len(names) > LABEL_STRIDE:
        raise DatasetError(f"{path}: more than {LABEL_STRIDE} labels")
    base = task_id * LABEL_STRIDE
    ids = {name: base + i for i, name in enumerate(names)}
    splits: dict[str, list[Example]] = {"train": [], "test": []}
    for line_no, text, name, split in rows:
        splits[split].append(Example(task_id * ID_STRIDE + line_no, ids[name], task_id, text=text))
    return TaskSpec(task_id, frozenset(ids.values()), splits["train"], splits["test"],
                    label_names={v: k for k, v in ids.items()})


def load_manifest(path) -> TaskSequence:
    """A manifest lists one dataset path per line (relative to the manifest); '#' starts a comment."""
    path = Path(path)
    entries = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            entries.append(line)
    if not entries:
        raise DatasetError(f"{path}: manifest lists no datasets")
    tasks = []
    for i, entry in enumerate(entries):
        p = Path(entry)
        if not p.is_absolute():
            p = path.parent / p
        tasks.append(load_jsonl(p, i))
    return TaskSequence(tasks, order_name=path.stem)


# ------------------------------------------------------------ synthetic tasks

NOISE_TOKENS = 40
NOISE_RATE = 0.6
POOL_SIZE = 24
CONCENTRATION = 1.0

# the default 4-task benchmark
BENCHMARK_DATA = dict(n_tasks=4, labels_per_task=2, train_per_label=200, test_per_label=100, vocab_size=60)


def gen_synthetic_tasks(
    n_tasks: int,
    labels_per_task: int,
    train_per_label: int,
    test_per_label: int,
    vocab_size: int,
    seed: int,
    *,
    noise_rate: float = NOISE_RATE,
    concentration: float = CONCENTRATION,
    pool_size: int = POOL_SIZE,
) -> TaskSequence:
    """Bag-of-token text tasks.

    Every task draws a pool of content tokens from ``vocab_size`` and each of
    its labels gets its own Dirichlet weighting over that pool, so labels in a
    task share words and differ in how often they use them. Pools of different
    tasks overlap, which makes one task's cues noise or conflicting cues for
    another. A share of every document comes from shared noise tokens.
    """
    for name, v in dict(n_tasks=n_tasks, labels_per_task=labels_per_task, train_per_label=train_per_label,
                        test_per_label=test_per_label, vocab_size=vocab_size).items():
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    if not 0.0 <= noise_rate < 1.0 or concentration <= 0 or pool_size < 1:
        raise ValueError("need 0 <= noise_rate < 1, concentration > 0, pool_size >= 1")
    rng = np.random.default_rng(seed)
    pool_size = min(pool_size, vocab_size)
    noise = [f"n{i}" for i in range(NOISE_TOKENS)]

    tasks = []
    next_id = 0
    for t in range(n_tasks):
        pool = rng.choice(vocab_size, size=pool_size, replace=False)
        label_ids = [t * labels_per_task + c for c in range(labels_per_task)]
        weights = [rng.dirichlet(np.full(pool_size, concentration)) for _ in label_ids]
        splits: dict[str, list[Example]] = {"train": [], "test": []}
        for split, count in (("train", train_per_label), ("test", test_per_label)):
            for c, w in enumerate(weights):
                for _ in range(count):
                    length = int(rng.integers(10, 31))
                    is_noise = rng.random(length) < noise_rate
                    content = rng.choice(pool, size=length, p=w)
                    noise_pick = rng.integers(0, len(noise), size=length)
                    words = [noise[noise_pick[i]] if is_noise[i] else f"w{content[i]}" for i in range(length)]
                    splits[split].append(Example(next_id, label_ids[c], t, text=" ".join(words)))
                    next_id += 1
        tasks.append(TaskSpec(t, frozenset(label_ids), splits["train"], splits["test"],
                              label_names={lid: f"t{t}c{c}" for c, lid in enumerate(label_ids)}))
    return TaskSequence(tasks, order_name=f"synthetic-{seed}")


# ------------------------------------------------------------------ batching


def label_blocks(examples: Sequence[Example], rng: np.random.Generator) -> list[list[Example]]:
    """Shuffle within each label and cut into blocks of 2 (3 when a label count is odd).

    A label with a single example yields a block of 1.
    """
    groups: dict[int, list[Example]] = {}
    for ex in examples:
        groups.setdefault(ex.label, []).append(ex)
    blocks = []
    for label in sorted(groups):
        items = groups[label]
        order = rng.permutation(len(items))
        items = [items[i] for i in order]
        n = len(items)
        if n <= 3:
            blocks.append(items)
            continue
        cuts = list(range(0, n - 1, 2)) if n % 2 else list(range(0, n, 2))
        for i, start in enumerate(cuts):
            end = cuts[i + 1] if i + 1 < len(cuts) else n
            blocks.append(items[start:end])
    order = rng.permutation(len(blocks))
    return [blocks[i] for i in order]


def pack_blocks(blocks: list[list[Example]], batch_size: int) -> list[list[Example]]:
    """First-fit packing of label blocks into batches of at most ``batch_size``."""
    pending = list(blocks)
    batches = []
    while pending:
        batch: list[Example] = []
        i = 0
        while i < len(pending) and len(batch) < batch_size:
            if len(batch) + len(pending[i]) <= batch_size:
                batch.extend(pending.pop(i))
            else:
                i += 1
        if not batch:  # block larger than the batch
            batch = pending.pop(0)
        batches.append(batch)
    return batches


def batch_iter(task: TaskSpec, batch_size: int, seed: int, epoch: int) -> Iterator[list[Example]]:
    """Yield one epoch of label-stratified mini-batches over ``task.train``."""
    if batch_size < 2:
        raise ValueError("batch_size must be >= 2")
    if not task.train:
        return
    rng = np.random.default_rng([seed, task.task_id, epoch])
    batches = pack_blocks(label_blocks(task.train, rng), batch_size)
    # a lone example anywhere joins a neighbouring batch
    i = 0
    while len(batches) > 1 and i < len(batches):
        if len(batches[i]) < 2:
            small = batches.pop(i)
            batches[i - 1 if i > 0 else 0].extend(small)
        else:
            i += 1
    yield from batches
