"""Sparse mixture-of-experts layer: sliced SwiGLU experts, noisy top-k
gating, N/k output re-scaling, and coefficient-of-variation balance losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dense_ffn import DenseFfn
from .tensor import Rng, ShapeError, as_matrix, as_vector, softmax, swish


def softplus(z: np.ndarray) -> np.ndarray:
    """log(1 + exp(z)) without overflow."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


@dataclass
class ExpertFfn:
    """One expert: SwiGLU slice of the dense FFN plus its source indices."""

    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray
    source_indices: tuple[int, ...]

    def __post_init__(self):
        self.w_up = as_matrix(self.w_up)
        d, m = self.w_up.shape
        self.w_gate = as_matrix(self.w_gate, d, m)
        self.w_down = as_matrix(self.w_down, m, d)

    @property
    def d(self) -> int:
        return self.w_up.shape[0]

    @property
    def m(self) -> int:
        return self.w_up.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = as_vector(x, self.d)
        h = (x @ self.w_up) * swish(x @ self.w_gate)
        return h @ self.w_down

    def param_count(self) -> int:
        return self.w_up.size + self.w_gate.size + self.w_down.size


@dataclass
class GateNetwork:
    """Noisy top-k gate: clean logits x @ w_g, optional noise scaled by
    softplus(x @ w_noise)."""

    w_g: np.ndarray
    w_noise: np.ndarray
    k: int
    noise_enabled: bool = False

    def __post_init__(self):
        self.w_g = as_matrix(self.w_g)
        d, n = self.w_g.shape
        self.w_noise = as_matrix(self.w_noise, d, n)
        if not (1 <= self.k <= n):
            raise ValueError(f"k={self.k} must satisfy 1 <= k <= N={n}")

    @property
    def n_experts(self) -> int:
        return self.w_g.shape[1]


@dataclass(frozen=True)
class TokenRouting:
    """Selected expert indices and their gate weights for one token."""

    experts: tuple[int, ...]
    weights: tuple[float, ...]


@dataclass(frozen=True)
class AuxLossTerms:
    """Balance-loss inputs for one token: dense softmax over clean logits
    (for the importance term) and the hard selection set (for load)."""

    dense_probs: np.ndarray
    selected: tuple[int, ...]


def gate_forward(
    gate: GateNetwork, x: np.ndarray, rng: Rng | None = None
) -> tuple[np.ndarray, tuple[int, ...]]:
    """Returns (weights over all N experts with exactly k nonzero, top-k set).

    Noisy logits: (x @ w_g)_i + eps_i * softplus((x @ w_noise)_i) with
    eps ~ N(0,1) when noise is enabled. Softmax is taken over the k
    surviving logits with the rest masked.
    """
    x = as_vector(x, gate.w_g.shape[0])
    logits = x @ gate.w_g
    if gate.noise_enabled:
        if rng is None:
            raise ValueError("noisy gate requires an rng")
        eps = np.array([rng.next_normal() for _ in range(gate.n_experts)])
        logits = logits + eps * softplus(x @ gate.w_noise)

    k = gate.k
    # top-k with ties broken toward the lower index
    order = sorted(range(gate.n_experts), key=lambda i: (-logits[i], i))
    topk = tuple(sorted(order[:k]))
    masked = np.full(gate.n_experts, -np.inf)
    masked[list(topk)] = logits[list(topk)]
    return softmax(masked), topk


@dataclass
class MoeLayer:
    """N experts + gate + fixed N/k output scale; optional always-on
    residual expert (sharing_inter partitions)."""

    experts: list[ExpertFfn]
    gate: GateNetwork
    scale_factor: float
    residual_expert: ExpertFfn | None = None

    def __post_init__(self):
        n = len(self.experts)
        if n < 1:
            raise ValueError("need at least one expert")
        if self.gate.n_experts != n:
            raise ShapeError(f"gate sized for {self.gate.n_experts} experts, layer has {n}")
        if self.gate.k > n:
            raise ValueError("k exceeds expert count")
        expected = n / self.gate.k
        if self.scale_factor != expected:
            raise ValueError(f"scale_factor must be N/k = {expected}")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    @property
    def d(self) -> int:
        return self.experts[0].d

    def activated_ffn_params(self) -> int:
        """Expert parameters touched per token (excludes gate, residual)."""
        return sum(self.experts[i].param_count() for i in range(self.gate.k))

    def total_ffn_params(self) -> int:
        return sum(e.param_count() for e in self.experts)


def moe_forward(
    layer: MoeLayer, x: np.ndarray, rng: Rng | None = None
) -> tuple[np.ndarray, TokenRouting, AuxLossTerms]:
    """y = sum_{i in topk} G(x)_i * (N/k) * E_i(x), plus the ungated,
    unscaled residual expert when present."""
    x = as_vector(x, layer.d)
    weights, topk = gate_forward(layer.gate, x, rng)
    y = np.zeros(layer.d)
    for i in topk:
        y += weights[i] * layer.scale_factor * layer.experts[i].forward(x)
    if layer.residual_expert is not None:
        y += layer.residual_expert.forward(x)

    clean = softmax(x @ layer.gate.w_g)
    routing = TokenRouting(
        experts=topk, weights=tuple(float(weights[i]) for i in topk)
    )
    aux = AuxLossTerms(dense_probs=clean, selected=topk)
    return y, routing, aux


def cv_squared(values: np.ndarray) -> float:
    """(std / mean)^2 with population variance; 0 for a single value."""
    v = np.asarray(values, dtype=np.float64)
    if v.size <= 1:
        return 0.0
    mean = v.mean()
    if mean == 0.0:
        return 0.0
    return float(v.var() / mean**2)


def balance_loss(
    batch_routing: list[TokenRouting], gate_probs: list[np.ndarray]
) -> tuple[float, float]:
    """Returns (importance_loss, load_loss).

    importance_loss: CV^2 of per-expert summed gate probabilities.
    load_loss: CV^2 of hard per-expert selection counts.
    """
    if not batch_routing or not gate_probs:
        raise ValueError("balance_loss requires a nonempty batch")
    n = len(gate_probs[0])
    importance = np.zeros(n)
    for p in gate_probs:
        importance += p
    counts = np.zeros(n)
    for r in batch_routing:
        for i in r.experts:
            counts[i] += 1
    return cv_squared(importance), cv_squared(counts)


def assemble_moe(
    ffn: DenseFfn,
    partition,
    k: int,
    gate_init: str = "zeros",
    seed: int = 0,
) -> MoeLayer:
    """Slice experts per the partition and attach a fresh gate.

    gate_init "zeros" routes uniformly at step 0; "random" draws small
    gaussian gate weights from the given seed.
    """
    from .partition import slice_expert

    n = partition.n
    if k > n:
        raise ValueError(f"k={k} exceeds expert count n={n}")
    experts = [slice_expert(ffn, s) for s in partition.sets]
    residual = None
    if partition.shared_residual:
        residual = slice_expert(ffn, partition.shared_residual)

    if gate_init == "zeros":
        w_g = np.zeros((ffn.d, n))
    elif gate_init == "random":
        w_g = Rng(seed).normal_array((ffn.d, n), 0.1)
    else:
        raise ValueError(f"unknown gate_init {gate_init!r}")
    gate = GateNetwork(w_g=w_g, w_noise=np.zeros((ffn.d, n)), k=k)
    return MoeLayer(
        experts=experts, gate=gate, scale_factor=n / k, residual_expert=residual
    )
