"""Width upscaling of MLPs under μP: widening, noise injection and infinite-width checks."""

from .checkpoint import Checkpoint
from .estimator import MupMLPClassifier, MupMLPRegressor
from .exceptions import (
    ConfigError,
    CsvFormatError,
    CsvValueError,
    InvalidMultiplierError,
    InvalidParameterError,
    MupscaleError,
    NumericalError,
    ShapeMismatchError,
    VersionMismatchError,
)
from .model import MlpModel, MlpSpec, forward
from .mup import BaseConstants, MupMultipliers, WeightKind, classify, resolve_hparams, scaled_hparams
from .optim import OptState, UpdateRule
from .upscale import UpscaleConfig, noise_std_for_layer, upscale
from .widen import WidenPlan, rescale_hparams, transfer_opt_state, widen_static

__version__ = "0.1.0"

__all__ = [
    "BaseConstants",
    "Checkpoint",
    "ConfigError",
    "CsvFormatError",
    "CsvValueError",
    "InvalidMultiplierError",
    "InvalidParameterError",
    "MlpModel",
    "MlpSpec",
    "MupMLPClassifier",
    "MupMLPRegressor",
    "MupMultipliers",
    "MupscaleError",
    "NumericalError",
    "OptState",
    "ShapeMismatchError",
    "UpdateRule",
    "UpscaleConfig",
    "VersionMismatchError",
    "WeightKind",
    "WidenPlan",
    "classify",
    "forward",
    "noise_std_for_layer",
    "rescale_hparams",
    "resolve_hparams",
    "scaled_hparams",
    "transfer_opt_state",
    "upscale",
    "widen_static",
]
