"""Expert construction: carve the intermediate neurons of a dense SwiGLU FFN
into n expert index sets, then slice expert weight matrices.

Two families:
  * neuron-independent (random / balanced k-means): disjoint equal-sized
    sets covering all of 0..d_h-1;
  * neuron-sharing (inner / inter): per-expert top-m neurons by importance,
    possibly overlapping; the inter variant extracts widely-shared neurons
    into an always-on residual block.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .dense_ffn import DenseFfn
from .tensor import Rng


class PartitionMethod(enum.Enum):
    INDEPENDENT_RANDOM = "independent_random"
    INDEPENDENT_CLUSTERING = "independent_clustering"
    SHARING_INNER = "sharing_inner"
    SHARING_INTER = "sharing_inter"


@dataclass(frozen=True)
class PartitionSpec:
    """Configuration for a split: expert count n, expert size m, method."""

    n: int
    m: int
    method: PartitionMethod
    residual_threshold: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be at least 1")
        if not (0.0 < self.residual_threshold <= 1.0):
            raise ValueError("residual_threshold must lie in (0, 1]")


@dataclass(frozen=True)
class ExpertPartition:
    """n sorted index sets over the intermediate neurons, plus an optional
    residual set (sharing_inter only)."""

    sets: tuple[tuple[int, ...], ...]
    d_h: int
    method: PartitionMethod
    shared_residual: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for s in self.sets:
            if not s:
                raise ValueError("expert index sets must be nonempty")
            if any(not (0 <= i < self.d_h) for i in s):
                raise ValueError("index out of range [0, d_h)")
            if any(s[i] >= s[i + 1] for i in range(len(s) - 1)):
                raise ValueError("index sets must be strictly increasing")
        if any(not (0 <= i < self.d_h) for i in self.shared_residual):
            raise ValueError("residual index out of range")

    @property
    def n(self) -> int:
        return len(self.sets)

    @property
    def m(self) -> int:
        return len(self.sets[0])

    def mean_pairwise_overlap(self) -> float:
        """Mean |S_i ∩ S_j| / m over expert pairs (sharing diagnostics)."""
        n, m = self.n, self.m
        if n < 2:
            return 0.0
        total = 0.0
        pairs = 0
        for i in range(n):
            si = set(self.sets[i])
            for j in range(i + 1, n):
                total += len(si & set(self.sets[j])) / m
                pairs += 1
        return total / pairs


def _check_divides(d_h: int, n: int) -> int:
    if n < 1 or d_h % n != 0:
        raise ValueError(f"expert count {n} must divide d_h={d_h} for independent splits")
    return d_h // n


def split_independent_random(d_h: int, n: int, rng: Rng) -> ExpertPartition:
    """Uniform random permutation of 0..d_h-1 chunked into n blocks of m."""
    m = _check_divides(d_h, n)
    perm = rng.shuffle(list(range(d_h)))
    sets = tuple(tuple(sorted(perm[j * m:(j + 1) * m])) for j in range(n))
    return ExpertPartition(sets=sets, d_h=d_h, method=PartitionMethod.INDEPENDENT_RANDOM)


def split_independent_clustering(
    ffn: DenseFfn, n: int, rng: Rng, max_iters: int = 100
) -> ExpertPartition:
    """Balanced k-means over per-neuron W_up vectors, exactly m per cluster.

    Assignment is greedy by ascending margin (distance to a centroid minus
    that point's mean distance over all centroids) with per-cluster capacity
    m; the most clear-cut point/cluster pairs claim their slots first.
    """
    m = _check_divides(ffn.d_h, n)
    if max_iters < 1:
        raise ValueError("max_iters must be at least 1")
    points = ffn.w_up.T.copy()  # one d-dim vector per intermediate neuron
    d_h = ffn.d_h

    # seed centroids from n distinct neurons
    idx = rng.shuffle(list(range(d_h)))[:n]
    centroids = points[idx].copy()

    assign = np.full(d_h, -1, dtype=int)
    for _ in range(max_iters):
        dist = np.linalg.norm(points[:, None, :] - centroids[None, :, :], axis=2)
        margin = dist - dist.mean(axis=1, keepdims=True)
        order = np.argsort(margin, axis=None, kind="stable")
        new_assign = np.full(d_h, -1, dtype=int)
        capacity = np.full(n, m, dtype=int)
        placed = 0
        for flat in order:
            p, c = divmod(int(flat), n)
            if new_assign[p] == -1 and capacity[c] > 0:
                new_assign[p] = c
                capacity[c] -= 1
                placed += 1
                if placed == d_h:
                    break
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(n):
            centroids[c] = points[assign == c].mean(axis=0)

    sets = tuple(tuple(int(i) for i in np.flatnonzero(assign == c)) for c in range(n))
    return ExpertPartition(sets=sets, d_h=d_h, method=PartitionMethod.INDEPENDENT_CLUSTERING)


def _top_m(values: np.ndarray, m: int, exclude: set[int] | None = None) -> list[int]:
    """Indices of the m largest entries; ties break toward the lower index."""
    banned = exclude or set()
    order = sorted(
        (i for i in range(len(values)) if i not in banned),
        key=lambda i: (-values[i], i),
    )
    if len(order) < m:
        raise ValueError(f"only {len(order)} candidates available, need {m}")
    return sorted(order[:m])


def split_sharing_inner(importance: list[np.ndarray], m: int) -> ExpertPartition:
    """S_i = top-m neurons by the i-th importance vector; sets may overlap."""
    vecs = [np.asarray(v, dtype=np.float64) for v in importance]
    d_h = len(vecs[0])
    if any(len(v) != d_h for v in vecs):
        raise ValueError("importance vectors must share length d_h")
    if m > d_h:
        raise ValueError(f"expert size {m} exceeds d_h={d_h}")
    sets = tuple(tuple(_top_m(v, m)) for v in vecs)
    return ExpertPartition(sets=sets, d_h=d_h, method=PartitionMethod.SHARING_INNER)


def split_sharing_inter(
    importance: list[np.ndarray], m: int, residual_threshold: float = 0.5
) -> ExpertPartition:
    """Top-m per expert, but neurons present in at least
    ceil(residual_threshold * n) provisional sets move to a shared residual
    block; each expert's freed slots are refilled from its own ranking."""
    if not (0.0 < residual_threshold <= 1.0):
        raise ValueError("residual_threshold must lie in (0, 1]")
    provisional = split_sharing_inner(importance, m)
    n, d_h = provisional.n, provisional.d_h
    need = int(np.ceil(residual_threshold * n))

    membership = np.zeros(d_h, dtype=int)
    for s in provisional.sets:
        for i in s:
            membership[i] += 1
    residual = tuple(int(i) for i in np.flatnonzero(membership >= need))

    banned = set(residual)
    vecs = [np.asarray(v, dtype=np.float64) for v in importance]
    sets = tuple(tuple(_top_m(v, m, exclude=banned)) for v in vecs)
    return ExpertPartition(
        sets=sets,
        d_h=d_h,
        method=PartitionMethod.SHARING_INTER,
        shared_residual=residual,
    )


def slice_expert(ffn: DenseFfn, s) -> "ExpertFfn":
    """Cut an expert out of the dense FFN: columns s of W_up/W_gate, rows s
    of W_down, in index order."""
    from .moe import ExpertFfn  # sliced experts live with the MoE layer

    idx = list(s)
    if not idx:
        raise ValueError("expert index set must be nonempty")
    if any(idx[i] >= idx[i + 1] for i in range(len(idx) - 1)):
        raise ValueError("expert index set must be strictly increasing")
    if idx[0] < 0 or idx[-1] >= ffn.d_h:
        raise ValueError(f"index out of range [0, {ffn.d_h})")
    cols = np.asarray(idx, dtype=int)
    return ExpertFfn(
        w_up=ffn.w_up[:, cols].copy(),
        w_gate=ffn.w_gate[:, cols].copy(),
        w_down=ffn.w_down[cols, :].copy(),
        source_indices=tuple(int(i) for i in idx),
    )
