"""Distillation trainer: fit an MoE layer to its dense teacher with plain
SGD, analytic gradients, and a warmup + cosine learning-rate schedule.

The objective per batch is mean squared error against the teacher's FFN
output plus a balance penalty:

    L = mean_b 0.5 * ||moe(x_b) - ffn(x_b)||^2
        + balance_coeff * (importance_loss + load_loss)

Gradients flow through the expert SwiGLU slices and through the softmax
over the selected gate logits; the discrete top-k selection itself is
straight-through (no gradient). The load term uses hard counts and is
piecewise constant, so it contributes no gradient. The importance term is
the CV^2 of per-expert summed dense softmax probabilities and is smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dense_ffn import DenseFfn, ffn_forward
from .moe import MoeLayer, TokenRouting, balance_loss, cv_squared, softmax
from .partition import ExpertPartition
from .tensor import Rng, swish, swish_grad


class DivergenceError(RuntimeError):
    """Loss became non-finite; carries the partial report."""

    def __init__(self, step: int, report: "TrainReport"):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 2e-4
    lr_final: float = 2e-5
    warmup_steps: int = 100
    total_steps: int = 500
    batch_size: int = 32
    balance_coeff: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.lr_final > self.lr_max:
            raise ValueError("lr_final must not exceed lr_max")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    importance_losses: list[float] = field(default_factory=list)
    load_losses: list[float] = field(default_factory=list)
    routing_entropies: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    final_mse: float = float("nan")

    def to_csv(self) -> str:
        lines = ["step,loss,importance_loss,load_loss,routing_entropy,lr"]
        for i in range(len(self.losses)):
            lines.append(
                f"{i},{self.losses[i]!r},{self.importance_losses[i]!r},"
                f"{self.load_losses[i]!r},{self.routing_entropies[i]!r},{self.lrs[i]!r}"
            )
        return "\n".join(lines) + "\n"


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to lr_final."""
    if step > cfg.total_steps:
        raise ValueError(f"step {step} beyond total_steps {cfg.total_steps}")
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr_max
        return cfg.lr_max * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    t = (step - cfg.warmup_steps) / span
    return cfg.lr_final + (cfg.lr_max - cfg.lr_final) * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class LayerGrads:
    """Gradient buffers shaped like the layer's trainable parameters."""

    w_up: list[np.ndarray]
    w_gate: list[np.ndarray]
    w_down: list[np.ndarray]
    gate_w_g: np.ndarray
    residual: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None

    @staticmethod
    def zeros_like(layer: MoeLayer) -> "LayerGrads":
        residual = None
        if layer.residual_expert is not None:
            r = layer.residual_expert
            residual = (
                np.zeros_like(r.w_up),
                np.zeros_like(r.w_gate),
                np.zeros_like(r.w_down),
            )
        return LayerGrads(
            w_up=[np.zeros_like(e.w_up) for e in layer.experts],
            w_gate=[np.zeros_like(e.w_gate) for e in layer.experts],
            w_down=[np.zeros_like(e.w_down) for e in layer.experts],
            gate_w_g=np.zeros_like(layer.gate.w_g),
            residual=residual,
        )


def batch_loss_and_grads(
    layer: MoeLayer,
    teacher: DenseFfn,
    xs: list[np.ndarray],
    balance_coeff: float,
) -> tuple[float, LayerGrads, dict]:
    """Exact loss and analytic gradients for one batch (gate noise off)."""
    n = layer.n_experts
    scale = layer.scale_factor
    grads = LayerGrads.zeros_like(layer)
    batch = len(xs)

    mse_sum = 0.0
    dense_probs: list[np.ndarray] = []
    routings: list[TokenRouting] = []
    # per-token caches needed for the importance-loss backward pass
    token_cache = []

    for x in xs:
        target, _ = ffn_forward(teacher, x)
        logits = x @ layer.gate.w_g
        order = sorted(range(n), key=lambda i: (-logits[i], i))
        topk = tuple(sorted(order[: layer.gate.k]))
        zsel = logits[list(topk)]
        g = softmax(zsel)

        # expert forwards with cached intermediates
        per_expert = {}
        y = np.zeros(layer.d)
        for pos, i in enumerate(topk):
            ex = layer.experts[i]
            a = x @ ex.w_up
            b = x @ ex.w_gate
            sw = swish(b)
            h = a * sw
            out = h @ ex.w_down
            per_expert[i] = (a, b, sw, h, out)
            y += g[pos] * scale * out
        res_cache = None
        if layer.residual_expert is not None:
            r = layer.residual_expert
            ra = x @ r.w_up
            rb = x @ r.w_gate
            rsw = swish(rb)
            rh = ra * rsw
            y += rh @ r.w_down
            res_cache = (ra, rb, rsw, rh)

        resid = y - target
        mse_sum += 0.5 * float(resid @ resid)
        dldy = resid / batch

        # expert weight gradients
        dgate_sel = np.zeros(len(topk))
        for pos, i in enumerate(topk):
            a, b, sw, h, out = per_expert[i]
            de = g[pos] * scale * dldy
            grads.w_down[i] += np.outer(h, de)
            dh = de @ layer.experts[i].w_down.T
            grads.w_up[i] += np.outer(x, dh * sw)
            grads.w_gate[i] += np.outer(x, dh * a * swish_grad(b))
            dgate_sel[pos] = scale * float(dldy @ out)
        if res_cache is not None:
            ra, rb, rsw, rh = res_cache
            r = layer.residual_expert
            ru, rg, rd = grads.residual
            rd += np.outer(rh, dldy)
            drh = dldy @ r.w_down.T
            ru += np.outer(x, drh * rsw)
            rg += np.outer(x, drh * ra * swish_grad(rb))

        # softmax over the selected logits; selection is straight-through
        dz = g * (dgate_sel - float(dgate_sel @ g))
        for pos, i in enumerate(topk):
            grads.gate_w_g[:, i] += x * dz[pos]

        p = softmax(logits)
        dense_probs.append(p)
        routings.append(
            TokenRouting(experts=topk, weights=tuple(float(w) for w in g))
        )
        token_cache.append((x, p))

    imp_loss, load_loss = balance_loss(routings, dense_probs)
    mse = mse_sum / batch
    total = mse + balance_coeff * (imp_loss + load_loss)

    if balance_coeff != 0.0:
        # CV^2 of per-expert summed dense probabilities; the per-expert
        # sums total `batch` exactly, so the mean is a constant batch/n.
        importance = np.sum(dense_probs, axis=0)
        mu = batch / n
        q = balance_coeff * (2.0 / n) * (importance - mu) / mu**2
        for x, p in token_cache:
            dzp = p * (q - float(q @ p))
            grads.gate_w_g += np.outer(x, dzp)

    stats = {
        "mse": mse,
        "importance_loss": imp_loss,
        "load_loss": load_loss,
        "routings": routings,
    }
    return total, grads, stats


def _apply_sgd(layer: MoeLayer, grads: LayerGrads, lr: float) -> None:
    for i, ex in enumerate(layer.experts):
        ex.w_up -= lr * grads.w_up[i]
        ex.w_gate -= lr * grads.w_gate[i]
        ex.w_down -= lr * grads.w_down[i]
    layer.gate.w_g -= lr * grads.gate_w_g
    if grads.residual is not None:
        r = layer.residual_expert
        r.w_up -= lr * grads.residual[0]
        r.w_gate -= lr * grads.residual[1]
        r.w_down -= lr * grads.residual[2]


def _routing_entropy(routings: list[TokenRouting], n: int) -> float:
    counts = np.zeros(n)
    for r in routings:
        for i in r.experts:
            counts[i] += 1
    p = counts / counts.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def distill_mse(layer: MoeLayer, teacher: DenseFfn, xs: list[np.ndarray]) -> float:
    """Mean 0.5 * ||moe(x) - ffn(x)||^2 over the given inputs, noise off."""
    from .moe import moe_forward

    total = 0.0
    for x in xs:
        y, _, _ = moe_forward(layer, x)
        t, _ = ffn_forward(teacher, x)
        total += 0.5 * float((y - t) @ (y - t))
    return total / len(xs)


def train_distill(
    layer: MoeLayer,
    teacher: DenseFfn,
    data: list[np.ndarray],
    cfg: TrainConfig,
) -> TrainReport:
    """SGD distillation of the teacher into the layer. The batch cursor
    cycles through `data` in order, so runs are fully deterministic."""
    if layer.d != teacher.d:
        raise ValueError("layer and teacher must share the model dimension d")
    report = TrainReport()
    cursor = 0
    for step in range(cfg.total_steps):
        xs = [data[(cursor + j) % len(data)] for j in range(cfg.batch_size)]
        cursor = (cursor + cfg.batch_size) % len(data)

        loss, grads, stats = batch_loss_and_grads(
            layer, teacher, xs, cfg.balance_coeff
        )
        lr = lr_at(step + 1, cfg)
        report.losses.append(loss)
        report.importance_losses.append(stats["importance_loss"])
        report.load_losses.append(stats["load_loss"])
        report.routing_entropies.append(
            _routing_entropy(stats["routings"], layer.n_experts)
        )
        report.lrs.append(lr)
        if not math.isfinite(loss):
            report.final_mse = float("nan")
            raise DivergenceError(step, report)

        _apply_sgd(layer, grads, lr)

    report.final_mse = distill_mse(layer, teacher, data)
    return report


def random_init_like(layer: MoeLayer, rng: Rng) -> MoeLayer:
    """Fresh layer with identical shapes but gaussian expert weights."""
    from .moe import ExpertFfn, GateNetwork

    d = layer.d
    experts = []
    for ex in layer.experts:
        m = ex.m
        experts.append(
            ExpertFfn(
                w_up=rng.normal_array((d, m), 1.0 / np.sqrt(d)),
                w_gate=rng.normal_array((d, m), 1.0 / np.sqrt(d)),
                w_down=rng.normal_array((m, d), 1.0 / np.sqrt(m)),
                source_indices=ex.source_indices,
            )
        )
    gate = GateNetwork(
        w_g=np.zeros_like(layer.gate.w_g),
        w_noise=np.zeros_like(layer.gate.w_noise),
        k=layer.gate.k,
    )
    return MoeLayer(experts=experts, gate=gate, scale_factor=layer.scale_factor)


def compare_from_scratch(
    teacher: DenseFfn,
    partition: ExpertPartition,
    cfg: TrainConfig,
    rng: Rng,
    k: int | None = None,
    num_samples: int | None = None,
) -> tuple[TrainReport, TrainReport]:
    """Train a split-initialized layer and a randomly initialized layer of
    identical shape on the same data; returns (split_report, scratch_report)."""
    from .moe import assemble_moe

    if k is None:
        k = partition.n
    count = num_samples if num_samples is not None else max(cfg.batch_size, 64)
    data = [rng.normal_array((teacher.d,)) for _ in range(count)]

    split_layer = assemble_moe(teacher, partition, k=k)
    scratch_layer = random_init_like(split_layer, rng)

    split_report = train_distill(split_layer, teacher, data, cfg)
    scratch_report = train_distill(scratch_layer, teacher, data, cfg)
    return split_report, scratch_report
