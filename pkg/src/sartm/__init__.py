"""RGB-thermal semantic segmentation on a numpy reverse-mode autodiff core."""

from .config import TrainConfig
from .errors import (
    ConfigError,
    ContractError,
    DomainError,
    FusionError,
    GeometryError,
    LossWarning,
    NumericalError,
    RasterFormatError,
    SartmError,
    ShapeError,
)
from .losses import LossWeights, l_cr, l_se, mask_average_pool, ohem_ce, total_loss
from .metrics import evaluate
from .model import SARTM
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"

__all__ = [
    "SARTM",
    "ConfigError",
    "ContractError",
    "DomainError",
    "FusionError",
    "GeometryError",
    "LossWarning",
    "LossWeights",
    "NumericalError",
    "RasterFormatError",
    "SartmError",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "backward",
    "evaluate",
    "l_cr",
    "l_se",
    "mask_average_pool",
    "no_grad",
    "ohem_ce",
    "total_loss",
]
