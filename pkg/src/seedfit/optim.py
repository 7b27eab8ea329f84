"""Shared Adam update rule with bias correction.

Used both for training the velocity network and for the seed optimizer, so
there is exactly one implementation of the recurrence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AdamParams:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self) -> None:
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise ValueError(f"learning rate must be positive and finite, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")


def adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    hp: AdamParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam step; ``step`` is the 1-based update count.

    Returns fresh (param, m, v) arrays; inputs are not modified.
    """
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient passed to adam_update")
    m = hp.beta1 * m + (1.0 - hp.beta1) * grad
    v = hp.beta2 * v + (1.0 - hp.beta2) * grad * grad
    m_hat = m / (1.0 - hp.beta1**step)
    v_hat = v / (1.0 - hp.beta2**step)
    param = param - hp.lr * m_hat / (np.sqrt(v_hat) + hp.eps)
    return param, m, v
