"""K-means exemplar selection after each task."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import Example, TaskSpec
from .encoder import EncoderState, encode_batch

log = logging.getLogger(__name__)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    trace: list[float] = field(default_factory=list)
    n_iter: int = 0


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d = (
        np.sum(points ** 2, axis=1)[:, None]
        - 2.0 * points @ centroids.T
        + np.sum(centroids ** 2, axis=1)[None, :]
    )
    return np.maximum(d, 0.0)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    centers = [points[rng.integers(n)]]
    closest = _sq_dists(points, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(points[idx])
        closest = np.minimum(closest, _sq_dists(points, points[idx:idx + 1])[:, 0])
    return np.array(centers)


def kmeans(points, K: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("kmeans needs a non-empty 2-D point set")
    if K < 1:
        raise ValueError("K must be >= 1")
    n = len(points)
    if K > n:
        log.warning("kmeans: K=%d exceeds %d points, clamping", K, n)
        K = n
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(points, K, rng)
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(points, centroids)
        assign = np.argmin(d, axis=1)
        trace.append(float(d[np.arange(n), assign].sum()))
        new = centroids.copy()
        for c in range(K):
            members = assign == c
            if members.any():
                new[c] = points[members].mean(axis=0)
            else:
                # Re-seed an empty cluster at the point farthest from its centroid.
                far = int(np.argmax(d[np.arange(n), assign]))
                new[c] = points[far]
                assign[far] = c
                d[far, assign[far]] = 0.0
        shift = float(np.sqrt(np.max(np.sum((new - centroids) ** 2, axis=1))))
        centroids = new
        if shift < tol:
            break
    d = _sq_dists(points, centroids)
    assign = np.argmin(d, axis=1)
    inertia = float(d[np.arange(n), assign].sum())
    trace.append(inertia)
    return KMeansResult(centroids, assign, inertia, trace, it)


def largest_remainder(total: int, weights) -> list[int]:
    """Split ``total`` proportionally to ``weights``; ties go to the earlier index."""
    w = np.asarray(weights, dtype=np.float64)
    if total <= 0 or w.sum() <= 0:
        return [0] * len(w)
    exact = total * w / w.sum()
    base = np.floor(exact).astype(int)
    rest = total - int(base.sum())
    frac = exact - base
    order = sorted(range(len(w)), key=lambda i: (-frac[i], i))
    for i in order[:rest]:
        base[i] += 1
    return base.tolist()


def label_quotas(counts: dict[int, int], m: int) -> dict[int, int]:
    """floor(m/|C|) per label, remainder to the labels with most training data.

    A label holding fewer examples than its quota gives up the shortfall,
    which is handed out one at a time in the same priority order.
    """
    labels = sorted(counts, key=lambda c: (-counts[c], c))
    if not labels:
        return {}
    base, rem = divmod(m, len(labels))
    quota = {c: base + (1 if i < rem else 0) for i, c in enumerate(labels)}
    spare = 0
    for c in labels:
        if quota[c] > counts[c]:
            spare += quota[c] - counts[c]
            quota[c] = counts[c]
    while spare > 0:
        moved = False
        for c in labels:
            if spare == 0:
                break
            if quota[c] < counts[c]:
                quota[c] += 1
                spare -= 1
                moved = True
        if not moved:
            break
    return quota


def select_samples(
    task: TaskSpec,
    encoder: EncoderState,
    m: int,
    clusters_per_label: int = 4,
    seed: int = 0,
) -> list[Example]:
    """Pick ``m`` exemplars from the task's training split.

    Each label's share is spread over its K-means clusters in proportion to
    cluster size, drawing uniformly inside a cluster.
    """
    groups = {c: exs for c, exs in task.by_label("train").items() if exs}
    quotas = label_quotas({c: len(exs) for c, exs in groups.items()}, m)
    chosen: list[Example] = []
    for c in sorted(groups):
        exs = groups[c]
        q = quotas[c]
        if q == 0:
            continue
        if q >= len(exs):
            chosen.extend(exs)
            continue
        rng = np.random.default_rng([seed, task.task_id, c])
        reps = encode_batch(encoder, exs).value
        k = min(clusters_per_label, len(exs))
        km = kmeans(reps, k, seed=int(rng.integers(2**31)))
        sizes = np.bincount(km.assignment, minlength=k)
        for cluster, take in enumerate(largest_remainder(q, sizes)):
            members = np.flatnonzero(km.assignment == cluster)
            if take:
                picked = rng.choice(members, size=take, replace=False)
                chosen.extend(exs[i] for i in sorted(picked))
    return chosen
