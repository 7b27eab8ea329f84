"""Unitary 2-D Fourier transforms and the spectral gradient adjoint.

The seed noise can be parameterized by its full complex spectrum. Both
transforms use the unitary normalization (1/sqrt(H*W) each way) so Parseval
holds exactly and the adjoint of the inverse transform is the forward
transform with no scale factor. Spectra of real fields satisfy Hermitian
symmetry S[u, v] = conj(S[-u mod H, -v mod W]); ``hermitian_project`` is the
orthogonal projection onto that subspace and is applied by construction on
every forward transform.

Gradients treat each complex bin as two independent real parameters (real
and imaginary part), so the gradient of f(idft2(S)) with respect to S is
dft2(grad_f) projected back onto the Hermitian subspace.

File format ``SNC1``: same 16-byte header layout as ``SNF1`` but with magic
``SNC1``, followed by interleaved (re, im) little-endian float32 pairs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fields import Field, ShapeError, _atomic_write, _frozen_array

SNC_MAGIC = b"SNC1"

HERMITIAN_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Immutable complex (C, H, W) grid holding a full 2-D spectrum."""

    data: np.ndarray

    def __post_init__(self) -> None:
        a = np.asarray(self.data)
        if a.ndim != 3:
            raise ShapeError(f"spectrum data must be 3-d (C,H,W), got shape {a.shape}")
        if min(a.shape) < 1:
            raise ShapeError(f"spectrum dimensions must all be >= 1, got {a.shape}")
        a = _frozen_array(a, np.complex128)
        if not np.all(np.isfinite(a.real)) or not np.all(np.isfinite(a.imag)):
            raise ValueError("spectrum entries must be finite")
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
    def zeros(cls, channels: int, height: int, width: int) -> "Spectrum":
        return cls(np.zeros((channels, height, width), dtype=np.complex128))


def _conj_reverse(a: np.ndarray) -> np.ndarray:
    # T[u, v] = conj(A[(-u) mod H, (-v) mod W]) via reverse-then-roll.
    rev = a[..., ::-1, ::-1]
    return np.conj(np.roll(np.roll(rev, 1, axis=-2), 1, axis=-1))


def hermitian_project(s: Spectrum) -> Spectrum:
    """Average a spectrum with its conjugate reversal.

    Idempotent; self-conjugate bins (DC and any Nyquist rows/columns) come
    out with an exactly zero imaginary part.
    """
    return Spectrum((s.data + _conj_reverse(s.data)) * 0.5)


def hermitian_residual(s: Spectrum) -> float:
    """Largest absolute deviation from Hermitian symmetry."""
    return float(np.max(np.abs(s.data - (s.data + _conj_reverse(s.data)) * 0.5)))


def dft2(x: Field) -> Spectrum:
    """Per-channel unitary 2-D DFT; output is exactly Hermitian."""
    s = np.fft.fft2(x.data, axes=(-2, -1), norm="ortho")
    return hermitian_project(Spectrum(s))


def idft2(s: Spectrum, *, tol: float = HERMITIAN_TOL) -> Field:
    """Per-channel unitary inverse 2-D DFT of a Hermitian spectrum.

    Inputs farther than ``tol`` (relative to the spectrum's magnitude scale)
    from the Hermitian subspace are rejected; smaller deviations are
    projected away before the transform so the output is exactly real.
    """
    scale = max(1.0, float(np.max(np.abs(s.data))))
    if hermitian_residual(s) > tol * scale:
        raise ValueError(
            f"spectrum is not Hermitian: residual {hermitian_residual(s):.3e} "
            f"exceeds {tol:.1e} * scale {scale:.3e}"
        )
    clean = hermitian_project(s)
    x = np.fft.ifft2(clean.data, axes=(-2, -1), norm="ortho").real
    return Field(x)


def adjoint_to_spectrum(g_spatial: Field) -> Spectrum:
    """Map a spatial gradient to the spectral-parameter gradient.

    With the unitary convention and (re, im) treated as independent real
    parameters, the chain rule through x = idft2(S) sends the spatial
    gradient to its forward transform, restricted to the Hermitian subspace.
    """
    return dft2(g_spatial)


def spectrum_to_pairs(s: Spectrum) -> np.ndarray:
    """Stack a spectrum into a real (2, C, H, W) array of (re, im) parts."""
    return np.stack([s.data.real, s.data.imag])


def pairs_to_spectrum(pairs: np.ndarray) -> Spectrum:
    if pairs.ndim != 4 or pairs.shape[0] != 2:
        raise ShapeError(f"expected (2,C,H,W) pair array, got shape {pairs.shape}")
    return Spectrum(pairs[0] + 1j * pairs[1])


def spectrum_to_bytes(s: Spectrum) -> bytes:
    header = SNC_MAGIC + struct.pack("<III", *s.shape)
    interleaved = np.empty(s.data.shape + (2,), dtype="<f4")
    interleaved[..., 0] = s.data.real
    interleaved[..., 1] = s.data.imag
    return header + interleaved.tobytes()


def spectrum_from_bytes(payload: bytes) -> Spectrum:
    if payload[:4] != SNC_MAGIC:
        raise ValueError(f"bad magic {payload[:4]!r}, expected {SNC_MAGIC!r}")
    c, h, w = struct.unpack("<III", payload[4:16])
    body = np.frombuffer(payload[16:], dtype="<f4")
    if body.size != 2 * c * h * w:
        raise ValueError(f"payload holds {body.size} floats, header says {2 * c * h * w}")
    pairs = body.astype(np.float64).reshape(c, h, w, 2)
    return Spectrum(pairs[..., 0] + 1j * pairs[..., 1])


def save_spectrum(path, s: Spectrum) -> None:
    _atomic_write(path, spectrum_to_bytes(s))


def load_spectrum(path) -> Spectrum:
    return spectrum_from_bytes(Path(path).read_bytes())
