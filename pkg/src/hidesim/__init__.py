"""Desk-scale simulator for TextHide-protected federated text classification and the attacks against it."""

from .config import ExperimentConfig, config_hash, load_config
from .estimators import RepReconRegressor, RssSearcher, TextHideClassifier, TextHideEncryptor
from .numerics import ConfigurationError, RngStream

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ExperimentConfig",
    "RepReconRegressor",
    "RngStream",
    "RssSearcher",
    "TextHideClassifier",
    "TextHideEncryptor",
    "config_hash",
    "load_config",
]
