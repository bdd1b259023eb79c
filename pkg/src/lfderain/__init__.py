"""Light-field rain removal at desk scale.

A small reverse-mode autodiff core drives 4D-convolutional networks for
rain-streak detection (with Gaussian-process pseudo-labels for unlabeled
scenes), depth/fog estimation and recurrent restoration.
"""

from .errors import (BoundsError, ContractError, DomainError, FormatError, LfDerainError,
                     NumericError, ShapeError)
from .lightfield import LightField, PatchSpec, from_epi_units, psnr, ssim, to_epi_units
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
