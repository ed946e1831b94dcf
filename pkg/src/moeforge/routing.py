"""Expert-specialization statistics over routing record streams.

Counts how many tokens each (layer, expert) pair received per domain,
then compares domains by the L2 distance between their normalized
per-expert routing distributions. A token selected by k experts
contributes k counts (selections, not first choices).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RoutingRecord:
    """One expert selection: token `token_id` from `domain` was routed to
    `expert` at `layer` with the given gate weight."""

    token_id: int
    domain: str
    layer: int
    expert: int
    weight: float


@dataclass
class RoutingStats:
    counts: np.ndarray  # [layer][expert][domain], integer selections
    domains: tuple[str, ...]
    tokens_per_domain: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.counts.shape[0]

    @property
    def n_experts(self) -> int:
        return self.counts.shape[1]


def collect_routing(
    records,
    n_layers: int,
    n_experts: int,
    domains: tuple[str, ...],
) -> RoutingStats:
    """Exact counting over a record stream; order-independent."""
    dom_index = {d: i for i, d in enumerate(domains)}
    counts = np.zeros((n_layers, n_experts, len(domains)), dtype=np.int64)
    token_ids: list[set[int]] = [set() for _ in domains]
    for r in records:
        if not (0 <= r.layer < n_layers):
            raise ValueError(f"layer {r.layer} out of range [0, {n_layers})")
        if not (0 <= r.expert < n_experts):
            raise ValueError(f"expert {r.expert} out of range [0, {n_experts})")
        if r.domain not in dom_index:
            raise ValueError(f"unknown domain label {r.domain!r}")
        d = dom_index[r.domain]
        counts[r.layer, r.expert, d] += 1
        token_ids[d].add(r.token_id)
    tokens = np.array([len(s) for s in token_ids], dtype=np.int64)
    return RoutingStats(counts=counts, domains=domains, tokens_per_domain=tokens)


def routing_l2_matrix(stats: RoutingStats, layer: int) -> np.ndarray:
    """Pairwise L2 distances between per-domain routing distributions at one
    layer. Each domain's expert-count vector is normalized to sum 1."""
    table = stats.counts[layer].astype(np.float64)  # [expert][domain]
    totals = table.sum(axis=0)
    empty = [stats.domains[i] for i in np.flatnonzero(totals == 0)]
    if empty:
        raise ValueError(f"domains with no routed tokens at layer {layer}: {empty}")
    dist = table / totals  # columns are distributions
    n = len(stats.domains)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.linalg.norm(dist[:, i] - dist[:, j]))
            out[i, j] = out[j, i] = d
    return out


def dead_expert_report(
    stats: RoutingStats, threshold: float
) -> list[tuple[int, int]]:
    """(layer, expert) pairs whose share of that layer's routed tokens falls
    below threshold / N (seldom-selected experts)."""
    if not (0.0 <= threshold < 1.0):
        raise ValueError("threshold must lie in [0, 1)")
    out = []
    n = stats.n_experts
    for layer in range(stats.n_layers):
        per_expert = stats.counts[layer].sum(axis=1).astype(np.float64)
        total = per_expert.sum()
        if total == 0:
            continue
        share = per_expert / total
        for e in range(n):
            if share[e] < threshold / n:
                out.append((layer, e))
    return out


def heatmap_csv(stats: RoutingStats, layer: int) -> str:
    """Per-layer counts table: rows are experts, columns are domains."""
    lines = ["expert," + ",".join(stats.domains)]
    for e in range(stats.n_experts):
        row = ",".join(str(int(c)) for c in stats.counts[layer, e])
        lines.append(f"{e},{row}")
    return "\n".join(lines) + "\n"


def l2_matrix_csv(stats: RoutingStats, layer: int) -> str:
    mat = routing_l2_matrix(stats, layer)
    lines = ["domain," + ",".join(stats.domains)]
    for i, d in enumerate(stats.domains):
        row = ",".join(repr(float(v)) for v in mat[i])
        lines.append(f"{d},{row}")
    return "\n".join(lines) + "\n"
