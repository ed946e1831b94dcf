"""Per-neuron importance scoring for neuron-sharing expert construction.

Each sample contributes |h * grad_h| to the running importance vector,
where h is the FFN's intermediate activation and grad_h the loss gradient
pulled back from the output. The loss itself is abstracted: callers supply
grad_y per sample (for a squared-error loss, grad_y = y - target).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense_ffn import DenseFfn, ffn_forward, ffn_output_grad_to_h
from .tensor import Rng, ShapeError


@dataclass
class ImportanceVector:
    """Accumulated |h * grad_h| per intermediate neuron."""

    values: np.ndarray
    samples_seen: int = 0

    @staticmethod
    def zeros(d_h: int) -> "ImportanceVector":
        return ImportanceVector(values=np.zeros(d_h), samples_seen=0)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("importance values must be a vector")
        if np.any(self.values < 0):
            raise ValueError("importance values must be nonnegative")


@dataclass
class DataGroup:
    """Labelled group of (input, output-gradient) pairs."""

    id: str
    samples: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)


def accumulate_importance(
    ffn: DenseFfn, group: DataGroup, v: ImportanceVector
) -> ImportanceVector:
    """Fold a data group into the importance vector (returns a new one)."""
    if len(v.values) != ffn.d_h:
        raise ShapeError(f"importance vector length {len(v.values)} != d_h {ffn.d_h}")
    values = v.values.copy()
    for x, grad_y in group.samples:
        _, h = ffn_forward(ffn, x)
        grad_h = ffn_output_grad_to_h(ffn, grad_y)
        values += np.abs(h * grad_h)
    return ImportanceVector(values=values, samples_seen=v.samples_seen + len(group.samples))


def group_data_by_clustering(
    samples: list[np.ndarray], n: int, rng: Rng, max_iters: int = 100
) -> list[list[int]]:
    """Standard (unbalanced) k-means on the inputs; returns n index groups.

    Seeded init picks n distinct samples as centroids. Empty clusters keep
    their previous centroid.
    """
    if n > len(samples):
        raise ValueError(f"cannot form {n} groups from {len(samples)} samples")
    pts = np.asarray(samples, dtype=np.float64)
    idx = rng.shuffle(list(range(len(samples))))[:n]
    centroids = pts[idx].copy()

    assign = np.full(len(samples), -1, dtype=int)
    for _ in range(max_iters):
        dist = np.linalg.norm(pts[:, None, :] - centroids[None, :, :], axis=2)
        new_assign = np.argmin(dist, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(n):
            members = pts[assign == c]
            if len(members):
                centroids[c] = members.mean(axis=0)
    return [[int(i) for i in np.flatnonzero(assign == c)] for c in range(n)]


def importance_by_groups(
    ffn: DenseFfn,
    samples: list[tuple[np.ndarray, np.ndarray]],
    n: int,
    rng: Rng,
    max_workers: int = 1,
) -> list[ImportanceVector]:
    """Cluster inputs into n groups and accumulate one importance vector per
    group. Groups may be processed in parallel; results merge in group order
    so the outcome is independent of worker count."""
    groups_idx = group_data_by_clustering([x for x, _ in samples], n, rng)
    groups = [
        DataGroup(id=f"group{c}", samples=[samples[i] for i in idx])
        for c, idx in enumerate(groups_idx)
    ]

    def run(group: DataGroup) -> ImportanceVector:
        return accumulate_importance(ffn, group, ImportanceVector.zeros(ffn.d_h))

    if max_workers > 1 and len(groups) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            return list(pool.map(run, groups))
    return [run(g) for g in groups]
