"""fundusclip: contrastive language-image pretraining on synthetic fundus data."""

from .autodiff import Tensor, Adam, backward, ShapeError, MissingGradientError
from .rng import Rng
from .estimator import FundusClip

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Adam", "backward", "ShapeError", "MissingGradientError", "Rng",
    "FundusClip", "__version__",
]
