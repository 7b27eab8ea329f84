"""Flow models at desk scale: sampling, guidance, and flow-matching training.

Time convention: unit time s in [0, 1] with s=1 pure noise and s=0 data, on
the grid s_k = 1 - k/T. The deterministic denoiser is plain Euler
integration, x <- x - (1/T) * v(x, s_k), always evaluating the velocity at
the left (larger-s) endpoint of each step, so analytic flows that are
singular at s=0 are never evaluated there.

Training follows standard flow matching: for a data sample x0 and fresh
noise eps, the interpolant s*eps + (1-s)*x0 must map to the target velocity
eps - x0 in mean squared error. Parameter gradients come from the network's
hand-written backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .fields import Field, Rng, ShapeError
from .net import (
    ConstantVelocityModel,
    ConvVelocityModel,
    DiracFlowModel,
    VelocityModel,
    load_checkpoint,
    save_checkpoint,
)
from .optim import AdamParams, adam_update

__all__ = [
    "SamplerConfig",
    "GuidanceConfig",
    "DenoiseResult",
    "TrainConfig",
    "TrainingDiverged",
    "VelocityModel",
    "ConvVelocityModel",
    "ConstantVelocityModel",
    "DiracFlowModel",
    "interpolant",
    "velocity",
    "denoise",
    "train_flow",
    "analytic_dirac_velocity",
    "constant_velocity",
    "guided_velocity",
    "guided_input_vjp",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class SamplerConfig:
    """Step count for the deterministic T-step denoiser."""

    T: int = 20

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"step count must be >= 1, got {self.T}")

    def times(self) -> list[float]:
        """Grid s_k = 1 - k/T for k = 0..T; partitions [0, 1] exactly."""
        return [1.0 - k / self.T for k in range(self.T + 1)]


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance: v_u + scale * (v_c - v_u)."""

    scale: float = 2.0
    null_class: int | None = None

    def __post_init__(self) -> None:
        if not np.isfinite(self.scale):
            raise ValueError(f"guidance scale must be finite, got {self.scale}")


@dataclass(frozen=True)
class DenoiseResult:
    x0: Field
    trajectory: list[Field] | None = None


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


def interpolant(x0: Field, eps: Field, s: float) -> Field:
    """Straight path s*eps + (1-s)*x0 between data (s=0) and noise (s=1)."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation time must lie in [0, 1], got {s}")
    if x0.shape != eps.shape:
        raise ShapeError(f"shape mismatch {x0.shape} vs {eps.shape}")
    return Field(s * eps.data + (1.0 - s) * x0.data)


def guided_velocity(
    model: VelocityModel,
    x: np.ndarray,
    s: float,
    class_id: int | None,
    guidance: GuidanceConfig,
) -> np.ndarray:
    """Raw-array guidance combination; single evaluation when unconditional."""
    if not model.conditional:
        return model.evaluate(x, s, None)
    null_id = guidance.null_class
    target_row = model.resolve_class(class_id)
    if target_row == model.resolve_class(null_id):
        return model.evaluate(x, s, null_id)
    if guidance.scale == 1.0:
        return model.evaluate(x, s, class_id)
    v_u = model.evaluate(x, s, null_id)
    if guidance.scale == 0.0:
        return v_u
    v_c = model.evaluate(x, s, class_id)
    return v_u + guidance.scale * (v_c - v_u)


def guided_input_vjp(
    model: VelocityModel,
    x: np.ndarray,
    s: float,
    class_id: int | None,
    guidance: GuidanceConfig,
    cotangent: np.ndarray,
) -> np.ndarray:
    """VJP of ``guided_velocity`` with respect to x, mirroring its branches."""
    if not model.conditional:
        return model.input_vjp(x, s, cotangent, None)
    null_id = guidance.null_class
    target_row = model.resolve_class(class_id)
    if target_row == model.resolve_class(null_id):
        return model.input_vjp(x, s, cotangent, null_id)
    if guidance.scale == 1.0:
        return model.input_vjp(x, s, cotangent, class_id)
    g_u = model.input_vjp(x, s, cotangent, null_id)
    if guidance.scale == 0.0:
        return g_u
    g_c = model.input_vjp(x, s, cotangent, class_id)
    return (1.0 - guidance.scale) * g_u + guidance.scale * g_c


def velocity(
    model: VelocityModel,
    x: Field,
    s: float,
    class_id: int | None,
    guidance: GuidanceConfig,
) -> Field:
    """Guided velocity field evaluation."""
    if not 0.0 < s <= 1.0:
        raise ValueError(f"velocity time must lie in (0, 1], got {s}")
    return Field(guided_velocity(model, x.data, s, class_id, guidance))


def denoise(
    model: VelocityModel,
    x_T: Field,
    sampler: SamplerConfig,
    guidance: GuidanceConfig,
    class_id: int | None = None,
    record_trajectory: bool = False,
) -> DenoiseResult:
    """Deterministic T-step Euler integration from noise (s=1) to data (s=0)."""
    T = sampler.T
    x = x_T.data.copy()
    traj = [x.copy()] if record_trajectory else None
    for k in range(T):
        s = 1.0 - k / T
        v = guided_velocity(model, x, s, class_id, guidance)
        x = x - v / T
        if not np.all(np.isfinite(x)):
            raise RuntimeError(f"denoise produced non-finite state at step {k} (s={s})")
        if traj is not None:
            traj.append(x.copy())
    return DenoiseResult(
        x0=Field(x),
        trajectory=[Field(t) for t in traj] if traj is not None else None,
    )


def analytic_dirac_velocity(c: Field) -> DiracFlowModel:
    """Closed-form flow whose trajectories are exactly straight lines into c."""
    return DiracFlowModel(c)


def constant_velocity(c: Field) -> ConstantVelocityModel:
    """Model with v = c everywhere; the endpoint map is the translation x - c."""
    return ConstantVelocityModel(c)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 50
    batch_size: int = 16
    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    null_dropout: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, steps_per_epoch and batch_size must be >= 1")
        if not 0.0 <= self.null_dropout <= 1.0:
            raise ValueError(f"null_dropout must lie in [0, 1], got {self.null_dropout}")


def train_flow(
    model: ConvVelocityModel,
    dataset: Sequence[Field],
    config: TrainConfig,
    rng: Rng,
    labels: Sequence[int] | None = None,
) -> tuple[ConvVelocityModel, list[float]]:
    """Flow-matching training with hand-derived parameter gradients.

    Mutates the model's parameters in place and returns it together with the
    per-epoch mean loss curve. Conditional models require ``labels``; each
    sample's class is dropped to the null class with probability
    ``null_dropout`` so classifier-free guidance has an unconditional branch.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    shape = dataset[0].shape
    for f in dataset:
        if f.shape != shape:
            raise ShapeError(f"dataset shapes differ: {f.shape} vs {shape}")
    if shape[0] != model.channels:
        raise ShapeError(f"dataset has {shape[0]} channels, model expects {model.channels}")
    if model.conditional:
        if labels is None or len(labels) != len(dataset):
            raise ValueError("conditional model needs one label per dataset sample")
        rows = np.asarray(labels, dtype=np.int64)
        if rows.min() < 0 or rows.max() >= model.n_classes:
            raise ValueError("labels must lie in [0, n_classes)")
    else:
        rows = np.zeros(len(dataset), dtype=np.int64)

    data = np.stack([f.data for f in dataset])
    n = data.shape[0]
    hp = AdamParams(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    m = np.zeros_like(model.theta)
    v = np.zeros_like(model.theta)
    step = 0
    losses: list[float] = []
    for epoch in range(config.epochs):
        epoch_losses = []
        for _ in range(config.steps_per_epoch):
            idx = rng.integers(0, n, config.batch_size)
            x0 = data[idx]
            eps = rng.standard_normal(x0.shape)
            s = 1.0 - rng.uniform(0.0, 1.0, config.batch_size)
            batch_rows = rows[idx].copy()
            if model.conditional and config.null_dropout > 0.0:
                drop = rng.uniform(0.0, 1.0, config.batch_size) < config.null_dropout
                batch_rows[drop] = model.n_classes
            xs = s[:, None, None, None] * eps + (1.0 - s[:, None, None, None]) * x0
            target = eps - x0
            pred, cache = model.forward_batch(xs, s, batch_rows, want_cache=True)
            resid = pred - target
            loss = float(np.mean(resid * resid))
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, update {step}: {loss}"
                )
            epoch_losses.append(loss)
            g_out = (2.0 / resid.size) * resid
            _, g_theta = model.backward_batch(cache, g_out, need_params=True)
            step += 1
            new_theta, m, v = adam_update(model.theta, g_theta, m, v, step, hp)
            model.theta[:] = new_theta
        losses.append(float(np.mean(epoch_losses)))
    return model, losses
