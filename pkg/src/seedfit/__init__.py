"""seedfit: optimize the initial seed noise of a flow model to fit a masked image.

The library implements the full pipeline at desk scale: deterministic grid
containers, a small trainable velocity network with hand-written
backpropagation, unitary 2-D spectral transforms, nearest-neighbor latent
observation encoding, linearized seed optimization with gradient masking,
blended denoising for inpainting, exact unrolled-gradient oracles, and
reference image metrics.
"""

__version__ = "0.1.0"

from .fields import Field, MaskField, Rng, apply_mask, gaussian_field
from .spectral import Spectrum, adjoint_to_spectrum, dft2, hermitian_project, idft2

__all__ = [
    "__version__",
    "Field",
    "MaskField",
    "Rng",
    "Spectrum",
    "apply_mask",
    "gaussian_field",
    "dft2",
    "idft2",
    "hermitian_project",
    "adjoint_to_spectrum",
]
