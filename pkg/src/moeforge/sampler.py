"""Domain-mixture scheduling for the training stream.

Static modes keep their weights fixed for the whole run. Dynamic modes
reweight every `update_interval_tokens` tokens by excess loss against a
reference model: w_i proportional to ref_w_i * exp(max(loss_i - ref_loss_i, 0)).
Filtering is modelled as externally supplied per-document masks.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

from .tensor import Rng

DEFAULT_DOMAINS = (
    "CommonCrawl",
    "C4",
    "GitHub",
    "Wikipedia",
    "Books",
    "arXiv",
    "StackExchange",
)


class SamplerMode(enum.Enum):
    STATIC = "static"
    DYNAMIC = "dynamic"


@dataclass(frozen=True)
class DomainWeights:
    domains: tuple[str, ...]
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if len(w) != len(self.domains):
            raise ValueError("one weight per domain required")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        object.__setattr__(self, "weights", w)

    @staticmethod
    def uniform(domains: tuple[str, ...] = DEFAULT_DOMAINS) -> "DomainWeights":
        n = len(domains)
        return DomainWeights(domains=domains, weights=np.full(n, 1.0 / n))

    @staticmethod
    def from_mapping(mapping: dict[str, float]) -> "DomainWeights":
        domains = tuple(mapping.keys())
        w = np.array([mapping[d] for d in domains], dtype=np.float64)
        return DomainWeights(domains=domains, weights=w / w.sum())


def load_preset(name_or_path: str) -> DomainWeights:
    """Load a weight preset: a packaged name (llama_v1, sheared_final,
    uniform) or a path to a JSON {domain: weight} file."""
    packaged = resources.files("moeforge").joinpath(f"presets/{name_or_path}.json")
    try:
        text = packaged.read_text()
    except (FileNotFoundError, ModuleNotFoundError):
        with open(name_or_path) as f:
            text = f.read()
    return DomainWeights.from_mapping(json.loads(text))


@dataclass(frozen=True)
class SamplerState:
    current: DomainWeights
    reference_weights: DomainWeights
    reference_loss: np.ndarray
    mode: SamplerMode
    update_interval_tokens: int
    tokens_per_draw: int = 1
    tokens_since_update: int = 0

    def __post_init__(self):
        if self.update_interval_tokens <= 0:
            raise ValueError("update_interval_tokens must be positive")
        loss = np.asarray(self.reference_loss, dtype=np.float64)
        if len(loss) != len(self.current.domains):
            raise ValueError("one reference loss per domain required")
        object.__setattr__(self, "reference_loss", loss)

    @staticmethod
    def static(weights: DomainWeights, update_interval_tokens: int = 1) -> "SamplerState":
        return SamplerState(
            current=weights,
            reference_weights=weights,
            reference_loss=np.zeros(len(weights.domains)),
            mode=SamplerMode.STATIC,
            update_interval_tokens=update_interval_tokens,
        )


def next_domain(state: SamplerState, rng: Rng) -> tuple[str, SamplerState]:
    """Draw one domain under the current weights; advances the token counter."""
    i = rng.choice_weighted(state.current.weights)
    new = replace(
        state, tokens_since_update=state.tokens_since_update + state.tokens_per_draw
    )
    return state.current.domains[i], new


def update_due(state: SamplerState) -> bool:
    return (
        state.mode is SamplerMode.DYNAMIC
        and state.tokens_since_update >= state.update_interval_tokens
    )


def dynamic_update(state: SamplerState, observed_loss) -> SamplerState:
    """Excess-loss reweighting: w_i proportional to
    ref_w_i * exp(max(observed_i - ref_i, 0)); resets the token counter."""
    if state.mode is not SamplerMode.DYNAMIC:
        raise ValueError("dynamic_update called on a static sampler")
    obs = np.asarray(observed_loss, dtype=np.float64)
    if obs.shape != state.reference_loss.shape:
        raise ValueError("observed_loss must have one entry per domain")
    if not np.all(np.isfinite(obs)):
        raise ValueError("observed losses must be finite")
    delta = np.maximum(obs - state.reference_loss, 0.0)
    if np.all(delta == 0.0):
        # no excess loss anywhere: revert to the reference weights exactly
        new_weights = state.reference_weights
    else:
        raw = state.reference_weights.weights * np.exp(delta)
        new_weights = DomainWeights(
            domains=state.current.domains, weights=raw / raw.sum()
        )
    return replace(state, current=new_weights, tokens_since_update=0)


def apply_filter_mask(stream: list, mask: list[bool]) -> list:
    """Drop documents whose flag is set, preserving order."""
    if len(stream) != len(mask):
        raise ValueError(
            f"mask length {len(mask)} != document count {len(stream)}"
        )
    return [doc for doc, drop in zip(stream, mask) if not drop]
