"""Mixture density network for lifting 2D joints to multiple 3D pose hypotheses."""

from .errors import ConfigError, DataError, MdnPoseError, NumericError
from .model import Architecture, MdnPoseNet
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = ["Architecture", "ConfigError", "DataError", "MdnPoseError", "MdnPoseNet", "NumericError",
           "TrainConfig", "train", "__version__"]
