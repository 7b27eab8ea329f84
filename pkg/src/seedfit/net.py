"""Velocity models: the evaluable interface and a small convolutional network.

The trainable network is deliberately tiny: two 3x3 convolution + tanh
blocks and a linear 3x3 output head, with a sinusoidal time embedding and an
optional learned per-class embedding injected as per-channel biases. Forward
evaluation, the input vector-Jacobian product, and the parameter
vector-Jacobian product are all written out by hand; the backward math here
is the single source of truth for both training and the unrolled gradient
oracle.

Checkpoint file layout: a little-endian uint32 byte length, the UTF-8 JSON
architecture descriptor, then the flat parameter vector as an SNF1 block of
shape (1, 1, n_params).
"""

from __future__ import annotations

import abc
import json
import struct
from pathlib import Path

import numpy as np

from .fields import Field, ShapeError, _atomic_write, field_from_bytes, field_to_bytes


class VelocityModel(abc.ABC):
    """Evaluable velocity field v(x, s, class) with hand-written VJPs."""

    n_classes: int = 0

    @property
    def conditional(self) -> bool:
        return self.n_classes > 0

    def resolve_class(self, class_id: int | None) -> int:
        """Map a class id to an embedding row; None selects the null class."""
        if class_id is None:
            return self.n_classes
        cid = int(class_id)
        if not 0 <= cid <= self.n_classes:
            raise ValueError(
                f"unknown class id {class_id}; model has classes 0..{self.n_classes - 1} "
                f"plus null id {self.n_classes}"
            )
        return cid

    @abc.abstractmethod
    def evaluate(self, x: np.ndarray, s: float, class_id: int | None = None) -> np.ndarray:
        """Velocity at state x (C,H,W) and time s; deterministic."""

    @abc.abstractmethod
    def input_vjp(
        self, x: np.ndarray, s: float, cotangent: np.ndarray, class_id: int | None = None
    ) -> np.ndarray:
        """(dv/dx)^T applied to ``cotangent`` at (x, s, class)."""


class ConstantVelocityModel(VelocityModel):
    """v(x, s) = c everywhere; the Jacobian in x is zero."""

    def __init__(self, c: Field) -> None:
        self.c = c

    def evaluate(self, x, s, class_id=None):
        if x.shape != self.c.shape:
            raise ShapeError(f"state shape {x.shape} does not match model shape {self.c.shape}")
        return self.c.data.copy()

    def input_vjp(self, x, s, cotangent, class_id=None):
        return np.zeros_like(cotangent)


class DiracFlowModel(VelocityModel):
    """v(x, s) = (x - c) / s, the exact flow of a point-mass data distribution.

    True trajectories are the straight lines x(s) = c + s * (x(1) - c), so
    the velocity is constant along each trajectory and Euler integration is
    exact for any step count. Evaluation at s <= 0 is undefined and rejected;
    the sampler only ever evaluates at left endpoints s >= 1/T.
    """

    def __init__(self, c: Field) -> None:
        self.c = c

    def _check(self, x, s):
        if s <= 0.0:
            raise ValueError(f"dirac flow velocity is singular at s={s}; require s > 0")
        if x.shape != self.c.shape:
            raise ShapeError(f"state shape {x.shape} does not match model shape {self.c.shape}")

    def evaluate(self, x, s, class_id=None):
        self._check(x, s)
        return (x - self.c.data) / s

    def input_vjp(self, x, s, cotangent, class_id=None):
        self._check(x, s)
        return cotangent / s


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(B,C,H,W) -> (B,C,H,W,9) patches of the zero-padded input."""
    win = np.lib.stride_tricks.sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))
    b, c, h, w = win.shape[:4]
    return np.ascontiguousarray(win).reshape(b, c, h, w, 9)


def conv3x3(cols: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Same-size 3x3 convolution from precomputed patches.

    cols: (B,Ci,H,W,9), weight: (Co,Ci,3,3), bias: (Co,).
    """
    co, ci = weight.shape[:2]
    w9 = weight.reshape(co, ci, 9)
    out = np.einsum("bihwk,oik->bohw", cols, w9, optimize=True)
    return out + bias[None, :, None, None]


def conv3x3_input_vjp(g: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """Cotangent of the convolution input given the output cotangent."""
    b, _, h, w = g.shape
    ci = weight.shape[1]
    gxp = np.zeros((b, ci, h + 2, w + 2))
    for k in range(9):
        dy, dx = divmod(k, 3)
        gxp[:, :, dy : dy + h, dx : dx + w] += np.einsum(
            "bohw,oi->bihw", g, weight[:, :, dy, dx], optimize=True
        )
    return gxp[:, :, 1 : h + 1, 1 : w + 1]


def conv3x3_weight_vjp(g: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cotangents of (weight, bias) given the output cotangent and patches."""
    co = g.shape[1]
    ci = cols.shape[1]
    gw9 = np.einsum("bohw,bihwk->oik", g, cols, optimize=True)
    return gw9.reshape(co, ci, 3, 3), g.sum(axis=(0, 2, 3))


def time_features(s: np.ndarray, dim: int) -> np.ndarray:
    """Sinusoidal features of the time scalar, (B,) -> (B, dim)."""
    half = dim // 2
    freqs = 2.0 ** np.arange(half)
    arg = np.pi * s[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class ConvVelocityModel(VelocityModel):
    """Trainable two-hidden-layer convolutional velocity network."""

    def __init__(
        self,
        channels: int,
        hidden: int = 16,
        time_dim: int = 8,
        n_classes: int = 0,
        theta: np.ndarray | None = None,
    ) -> None:
        if time_dim % 2 != 0 or time_dim < 2:
            raise ValueError(f"time_dim must be even and >= 2, got {time_dim}")
        self.channels = channels
        self.hidden = hidden
        self.time_dim = time_dim
        self.n_classes = n_classes
        c, f, e = channels, hidden, time_dim
        self._spec = [
            ("w1", (f, c, 3, 3)),
            ("b1", (f,)),
            ("t1", (f, e)),
            ("w2", (f, f, 3, 3)),
            ("b2", (f,)),
            ("t2", (f, e)),
            ("w3", (c, f, 3, 3)),
            ("b3", (c,)),
        ]
        if n_classes > 0:
            self._spec.append(("emb", (n_classes + 1, e)))
        self.n_params = sum(int(np.prod(shape)) for _, shape in self._spec)
        if theta is None:
            theta = np.zeros(self.n_params)
        if theta.shape != (self.n_params,):
            raise ShapeError(f"theta must have shape ({self.n_params},), got {theta.shape}")
        self.theta = theta.astype(np.float64)
        self.p: dict[str, np.ndarray] = {}
        off = 0
        for name, shape in self._spec:
            size = int(np.prod(shape))
            self.p[name] = self.theta[off : off + size].reshape(shape)
            off += size

    @classmethod
    def initialized(
        cls,
        rng,
        channels: int,
        hidden: int = 16,
        time_dim: int = 8,
        n_classes: int = 0,
    ) -> "ConvVelocityModel":
        """Fresh model with fan-in scaled weights and a damped output head."""
        model = cls(channels, hidden, time_dim, n_classes)
        p = model.p
        p["w1"][:] = rng.standard_normal(p["w1"].shape) / np.sqrt(channels * 9)
        p["t1"][:] = rng.standard_normal(p["t1"].shape) * (0.5 / np.sqrt(time_dim))
        p["w2"][:] = rng.standard_normal(p["w2"].shape) / np.sqrt(hidden * 9)
        p["t2"][:] = rng.standard_normal(p["t2"].shape) * (0.5 / np.sqrt(time_dim))
        p["w3"][:] = rng.standard_normal(p["w3"].shape) * (0.1 / np.sqrt(hidden * 9))
        if n_classes > 0:
            p["emb"][:] = rng.standard_normal(p["emb"].shape) * 0.1
        return model

    def descriptor(self) -> dict:
        return {
            "kind": "conv",
            "version": 1,
            "channels": self.channels,
            "hidden": self.hidden,
            "time_dim": self.time_dim,
            "n_classes": self.n_classes,
            "activation": "tanh",
        }

    def parameters_flat(self) -> np.ndarray:
        return self.theta.copy()

    def set_parameters_flat(self, theta: np.ndarray) -> None:
        if theta.shape != self.theta.shape:
            raise ShapeError(f"expected theta shape {self.theta.shape}, got {theta.shape}")
        self.theta[:] = theta

    def _cond_rows(self, class_rows: np.ndarray) -> np.ndarray:
        if self.n_classes > 0:
            return self.p["emb"][class_rows]
        return np.zeros((class_rows.shape[0], self.time_dim))

    def forward_batch(
        self,
        x: np.ndarray,
        s: np.ndarray,
        class_rows: np.ndarray,
        want_cache: bool = False,
    ):
        """Batched forward pass; class_rows are resolved embedding rows."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (B,{self.channels},H,W) input, got {x.shape}")
        cond = time_features(np.asarray(s, dtype=np.float64), self.time_dim) + self._cond_rows(
            class_rows
        )
        cols1 = _im2col3(x)
        a1 = conv3x3(cols1, self.p["w1"], self.p["b1"]) + (cond @ self.p["t1"].T)[
            :, :, None, None
        ]
        h1 = np.tanh(a1)
        cols2 = _im2col3(h1)
        a2 = conv3x3(cols2, self.p["w2"], self.p["b2"]) + (cond @ self.p["t2"].T)[
            :, :, None, None
        ]
        h2 = np.tanh(a2)
        cols3 = _im2col3(h2)
        out = conv3x3(cols3, self.p["w3"], self.p["b3"])
        if not want_cache:
            return out, None
        cache = {
            "cond": cond,
            "rows": class_rows,
            "cols1": cols1,
            "h1": h1,
            "cols2": cols2,
            "h2": h2,
            "cols3": cols3,
        }
        return out, cache

    def backward_batch(
        self,
        cache: dict,
        g_out: np.ndarray,
        need_input: bool = False,
        need_params: bool = False,
    ):
        """VJPs of the batched forward pass; returns (g_x, g_theta_flat)."""
        h1, h2 = cache["h1"], cache["h2"]
        gh2 = conv3x3_input_vjp(g_out, self.p["w3"])
        ga2 = gh2 * (1.0 - h2 * h2)
        gh1 = conv3x3_input_vjp(ga2, self.p["w2"])
        ga1 = gh1 * (1.0 - h1 * h1)
        gx = conv3x3_input_vjp(ga1, self.p["w1"]) if need_input else None
        if not need_params:
            return gx, None
        gw3, gb3 = conv3x3_weight_vjp(g_out, cache["cols3"])
        gw2, gb2 = conv3x3_weight_vjp(ga2, cache["cols2"])
        gw1, gb1 = conv3x3_weight_vjp(ga1, cache["cols1"])
        ga1_sum = ga1.sum(axis=(2, 3))
        ga2_sum = ga2.sum(axis=(2, 3))
        cond = cache["cond"]
        gt1 = ga1_sum.T @ cond
        gt2 = ga2_sum.T @ cond
        grads = {"w1": gw1, "b1": gb1, "t1": gt1, "w2": gw2, "b2": gb2, "t2": gt2,
                 "w3": gw3, "b3": gb3}
        if self.n_classes > 0:
            gcond = ga1_sum @ self.p["t1"] + ga2_sum @ self.p["t2"]
            gemb = np.zeros_like(self.p["emb"])
            np.add.at(gemb, cache["rows"], gcond)
            grads["emb"] = gemb
        flat = np.concatenate([grads[name].ravel() for name, _ in self._spec])
        return gx, flat

    def evaluate(self, x, s, class_id=None):
        row = self.resolve_class(class_id)
        out, _ = self.forward_batch(
            x[None], np.array([float(s)]), np.array([row]), want_cache=False
        )
        return out[0]

    def input_vjp(self, x, s, cotangent, class_id=None):
        row = self.resolve_class(class_id)
        _, cache = self.forward_batch(
            x[None], np.array([float(s)]), np.array([row]), want_cache=True
        )
        gx, _ = self.backward_batch(cache, cotangent[None], need_input=True)
        return gx[0]


def save_checkpoint(path, model: ConvVelocityModel) -> None:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode()
    block = field_to_bytes(Field(model.parameters_flat()[None, None, :]))
    _atomic_write(path, struct.pack("<I", len(desc)) + desc + block)


def load_checkpoint(path) -> ConvVelocityModel:
    payload = Path(path).read_bytes()
    (n,) = struct.unpack("<I", payload[:4])
    desc = json.loads(payload[4 : 4 + n].decode())
    if desc.get("kind") != "conv":
        raise ValueError(f"unsupported checkpoint kind {desc.get('kind')!r}")
    theta = field_from_bytes(payload[4 + n :]).data.ravel()
    return ConvVelocityModel(
        channels=desc["channels"],
        hidden=desc["hidden"],
        time_dim=desc["time_dim"],
        n_classes=desc["n_classes"],
        theta=theta,
    )
