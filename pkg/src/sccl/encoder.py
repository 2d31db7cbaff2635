"""Hashed n-gram features followed by an MLP and row normalisation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .data import Example

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
CHECKPOINT_FORMAT = "sccl-encoder/1"


def fnv1a_64(data: bytes) -> int:
    h = FNV64_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV64_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class HashingConfig:
    dim: int = 1024
    ngram_min: int = 1
    ngram_max: int = 2
    signed: bool = True

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("hashing dim must be >= 2")
        if not 1 <= self.ngram_min <= self.ngram_max:
            raise ValueError("need 1 <= ngram_min <= ngram_max")


def ngrams(text: str, lo: int, hi: int) -> list[str]:
    tokens = text.lower().split()
    out = []
    for n in range(lo, hi + 1):
        out.extend(" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1))
    return out


@lru_cache(maxsize=200_000)
def _hashed(cfg: HashingConfig, text: str) -> tuple[tuple[int, float], ...]:
    acc: dict[int, float] = {}
    for gram in ngrams(text, cfg.ngram_min, cfg.ngram_max):
        h = fnv1a_64(gram.encode("utf-8"))
        # The top bit is independent of the index bits for any dim below 2**63.
        sign = -1.0 if cfg.signed and (h >> 63) else 1.0
        idx = h % cfg.dim
        acc[idx] = acc.get(idx, 0.0) + sign
    return tuple(sorted(acc.items()))


def hash_vectorize(cfg: HashingConfig, text: str) -> np.ndarray:
    vec = np.zeros(cfg.dim)
    for idx, val in _hashed(cfg, text):
        vec[idx] = val
    return vec


@dataclass
class EncoderState:
    hashing: HashingConfig
    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def init(cls, hashing: HashingConfig | None = None, hidden: Sequence[int] = (256,),
             out_dim: int = 128, seed: int = 0) -> "EncoderState":
        hashing = hashing or HashingConfig()
        sizes = [hashing.dim, *hidden, out_dim]
        rng = np.random.default_rng(seed)
        layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append((rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros((1, fan_out))))
        return cls(hashing, layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(self.layers):
            params[f"layer{i}.weight"] = w
            params[f"layer{i}.bias"] = b
        return params

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.parameters().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    # ----------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        doc = {
            "format": CHECKPOINT_FORMAT,
            "hashing": asdict(self.hashing),
            "layers": [
                {"weight_shape": list(w.shape), "weight": w.ravel().tolist(),
                 "bias_shape": list(b.shape), "bias": b.ravel().tolist()}
                for w, b in self.layers
            ],
        }
        Path(path).write_text(json.dumps(doc), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EncoderState":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        if doc.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {doc.get('format')!r}")
        layers = [
            (np.array(l["weight"], dtype=np.float64).reshape(l["weight_shape"]),
             np.array(l["bias"], dtype=np.float64).reshape(l["bias_shape"]))
            for l in doc["layers"]
        ]
        return cls(HashingConfig(**doc["hashing"]), layers)


@dataclass(frozen=True)
class EncoderSnapshot:
    """Frozen copy of an encoder; encoding through it never records gradients."""

    state: EncoderState = field(repr=False)
    digest: str = ""

    def encode(self, batch: Sequence[Example]) -> np.ndarray:
        return encode_batch(self.state, batch).value

    def unchanged(self) -> bool:
        return self.state.digest() == self.digest


def snapshot(state: EncoderState) -> EncoderSnapshot:
    frozen = copy.deepcopy(state)
    for w, b in frozen.layers:
        w.setflags(write=False)
        b.setflags(write=False)
    return EncoderSnapshot(frozen, frozen.digest())


def featurize(state: EncoderState, batch: Sequence[Example]) -> np.ndarray:
    rows = np.zeros((len(batch), state.in_dim))
    for r, ex in enumerate(batch):
        if ex.raw_features is not None:
            if len(ex.raw_features) != state.in_dim:
                raise dc.DimensionError(
                    f"example {ex.id}: raw_features has {len(ex.raw_features)} dims, encoder expects {state.in_dim}")
            rows[r] = ex.raw_features
        else:
            if state.hashing.dim != state.in_dim:
                raise dc.DimensionError("hashing dim does not match the encoder input")
            for idx, val in _hashed(state.hashing, ex.text):
                rows[r, idx] = val
    return rows


def encode_batch(state: EncoderState, batch: Sequence[Example], tape: dc.Tape | None = None) -> dc.Tensor:
    """Unit-norm representations, one row per example."""
    if not batch:
        raise ValueError("encode_batch needs a non-empty batch")
    return encode_features(state, featurize(state, batch), tape)


def encode_features(state: EncoderState, x: np.ndarray, tape: dc.Tape | None = None) -> dc.Tensor:
    h = dc.Tensor(x)
    last = len(state.layers) - 1
    for i, (w, b) in enumerate(state.layers):
        if tape is not None:
            w, b = tape.watch(w), tape.watch(b)
        h = dc.add_bias(dc.matmul(h, w), b)
        if i < last:
            h = dc.relu(h)
    return dc.l2_normalize_rows(h)
