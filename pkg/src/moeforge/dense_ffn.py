"""Dense SwiGLU feed-forward layer: the teacher and the source of expert splits.

Forward: h = (x @ W_up) * swish(x @ W_gate), y = h @ W_down. Input x is a
row vector left-multiplying the weights, so "neuron j" means column j of
W_up/W_gate and row j of W_down.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, as_matrix, as_vector, swish


@dataclass(frozen=True)
class DenseFfn:
    """SwiGLU FFN weights: w_up (d, d_h), w_gate (d, d_h), w_down (d_h, d)."""

    w_up: np.ndarray
    w_gate: np.ndarray
    w_down: np.ndarray

    def __post_init__(self):
        w_up = as_matrix(self.w_up)
        d, d_h = w_up.shape
        if d < 1 or d_h < 1:
            raise ValueError("d and d_h must be at least 1")
        object.__setattr__(self, "w_up", w_up)
        object.__setattr__(self, "w_gate", as_matrix(self.w_gate, d, d_h))
        object.__setattr__(self, "w_down", as_matrix(self.w_down, d_h, d))

    @property
    def d(self) -> int:
        return self.w_up.shape[0]

    @property
    def d_h(self) -> int:
        return self.w_up.shape[1]

    @staticmethod
    def random(d: int, d_h: int, rng, scale: float | None = None) -> "DenseFfn":
        """Gaussian init scaled 1/sqrt(d) (1/sqrt(d_h) for the down projection)."""
        up_scale = scale if scale is not None else 1.0 / np.sqrt(d)
        down_scale = scale if scale is not None else 1.0 / np.sqrt(d_h)
        return DenseFfn(
            w_up=rng.normal_array((d, d_h), up_scale),
            w_gate=rng.normal_array((d, d_h), up_scale),
            w_down=rng.normal_array((d_h, d), down_scale),
        )


def ffn_forward(ffn: DenseFfn, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Returns (y, h). h is exposed because importance scoring consumes it."""
    x = as_vector(x, ffn.d)
    h = (x @ ffn.w_up) * swish(x @ ffn.w_gate)
    return h @ ffn.w_down, h


def ffn_output_grad_to_h(ffn: DenseFfn, grad_y: np.ndarray) -> np.ndarray:
    """Chain rule through y = h @ W_down: grad_h = grad_y @ W_down^T."""
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != (ffn.d,):
        raise ShapeError(f"grad_y must have length {ffn.d}, got {grad_y.shape}")
    return grad_y @ ffn.w_down.T
