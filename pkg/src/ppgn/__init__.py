"""Plug-and-play generative sampling: a generator, a learned prior, and a condition network.

Modules:

- :mod:`ppgn.tensor` reverse-mode autodiff over float64 arrays
- :mod:`ppgn.nets` dense networks, training loops, DAE scores, GAN losses
- :mod:`ppgn.samplers` MH, MALA, MALA-approx and the decoupled update
- :mod:`ppgn.variants` pixel- and code-space samplers, conditions, inpainting
- :mod:`ppgn.evaluation` confidence filtering, quality, diversity, mixing
- :mod:`ppgn.io` IDX, checkpoints, PGM grids, key=value text
"""

from .nets import ModelBundle
from .samplers import ChainError, ChainRecord, SamplerConfig
from .tensor import NonFiniteError, ShapeError, Tape, Tensor
from .variants import Condition, MaskedImage, VariantSpec, inpaint, sample

__version__ = "0.1.0"

__all__ = [
    "ChainError",
    "ChainRecord",
    "Condition",
    "MaskedImage",
    "ModelBundle",
    "NonFiniteError",
    "SamplerConfig",
    "ShapeError",
    "Tape",
    "Tensor",
    "VariantSpec",
    "inpaint",
    "sample",
]
