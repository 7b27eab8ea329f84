"""Grid containers, the deterministic RNG, and the binary observation mask.

Every tensor in the pipeline is a real (channels, height, width) grid stored
as a row-major float64 array. Images, latents, velocities, gradients, and
seed noise all share the ``Field`` container; masks are spatial (H, W) grids
of exact 0.0/1.0 entries and broadcast across channels.

File format ``SNF1``: 16-byte header (magic ``SNF1`` then little-endian
uint32 C, H, W) followed by little-endian float32 data in (c, h, w) row-major
order. Masks use the same format with C = 1 and 0.0/1.0 entries.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNF_MAGIC = b"SNF1"

# Identifies the generator family and the normal-sampling transform so output
# metadata can pin the exact stream: PCG64 with numpy's ziggurat sampler.
RNG_ALGORITHM = "pcg64-numpy-ziggurat"


class ShapeError(ValueError):
    """Raised for malformed or inconsistent grid shapes."""


def _frozen_array(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, order="C", copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Field:
    """Immutable real-valued (C, H, W) grid with finite entries."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ShapeError(f"field data must be 3-d (C,H,W), got shape {a.shape}")
        if min(a.shape) < 1:
            raise ShapeError(f"field dimensions must all be >= 1, got {a.shape}")
        a = _frozen_array(a, np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError("field entries must be finite")
        object.__setattr__(self, "data", a)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, channels: int, height: int, width: int) -> "Field":
        return cls(np.zeros((channels, height, width)))

    @classmethod
    def full(cls, shape: tuple[int, int, int], value: float) -> "Field":
        return cls(np.full(shape, float(value)))


@dataclass(frozen=True, eq=False)
class MaskField:
    """Immutable (H, W) observation mask; 1 marks an observed pixel."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.bits)
        if a.ndim != 2:
            raise ShapeError(f"mask must be 2-d (H,W), got shape {a.shape}")
        if min(a.shape) < 1:
            raise ShapeError(f"mask dimensions must all be >= 1, got {a.shape}")
        a = _frozen_array(a, np.float64)
        if not np.all((a == 0.0) | (a == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        object.__setattr__(self, "bits", a)

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape

    def as_bool(self) -> np.ndarray:
        return self.bits == 1.0

    def observed_count(self) -> int:
        return int(self.bits.sum())

    def complement(self) -> "MaskField":
        return MaskField(1.0 - self.bits)

    @classmethod
    def ones(cls, height: int, width: int) -> "MaskField":
        return cls(np.ones((height, width)))

    @classmethod
    def zeros(cls, height: int, width: int) -> "MaskField":
        return cls(np.zeros((height, width)))


class Rng:
    """Deterministic random stream.

    Streams come from numpy's PCG64 bit generator seeded with a 64-bit
    integer; identical seeds reproduce identical draws on every platform.
    ``derive`` builds an independent child stream from a stable hash of the
    parent seed and a key path, so per-instance streams never overlap.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size)

    def derive(self, *keys) -> "Rng":
        h = hashlib.sha256(repr((self.seed,) + tuple(keys)).encode()).digest()
        return Rng(int.from_bytes(h[:8], "little") >> 1)


def gaussian_field(rng: Rng, shape: tuple[int, int, int]) -> Field:
    """Draw a Field of i.i.d. standard-normal entries, deterministic per seed."""
    if len(shape) != 3 or min(shape) < 1:
        raise ShapeError(f"invalid field shape {shape}")
    return Field(rng.standard_normal(shape))


def apply_mask(x: Field, mask: MaskField) -> Field:
    """Elementwise mask: observed entries kept, unobserved zeroed."""
    if (x.height, x.width) != mask.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match field {x.shape}")
    return Field(x.data * mask.bits[None, :, :])


def _atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def field_to_bytes(x: Field) -> bytes:
    header = SNF_MAGIC + struct.pack("<III", *x.shape)
    return header + x.data.astype("<f4").tobytes()


def field_from_bytes(payload: bytes) -> Field:
    if payload[:4] != SNF_MAGIC:
        raise ValueError(f"bad magic {payload[:4]!r}, expected {SNF_MAGIC!r}")
    c, h, w = struct.unpack("<III", payload[4:16])
    body = np.frombuffer(payload[16:], dtype="<f4")
    if body.size != c * h * w:
        raise ValueError(f"payload holds {body.size} floats, header says {c * h * w}")
    return Field(body.astype(np.float64).reshape(c, h, w))


def save_field(path, x: Field) -> None:
    _atomic_write(path, field_to_bytes(x))


def load_field(path) -> Field:
    return field_from_bytes(Path(path).read_bytes())


def save_mask(path, mask: MaskField) -> None:
    _atomic_write(path, field_to_bytes(Field(mask.bits[None, :, :])))


def load_mask(path) -> MaskField:
    f = field_from_bytes(Path(path).read_bytes())
    if f.channels != 1:
        raise ValueError(f"mask file must have C=1, got {f.channels}")
    return MaskField(f.data[0])
