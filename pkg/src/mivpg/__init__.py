"""Multi-instance visual prompt generation: query-based MIL pooling over bags."""

from .config import MivpgConfig
from .errors import (
    ConfigError,
    ContractError,
    EmptyBagError,
    GenerationError,
    MivpgError,
    ShapeError,
    TrainingError,
)
from .model import Bag, MivpgParams, flatten_baseline_forward, init_params, mivpg_forward
from .rng import Rng

__all__ = [
    "Bag",
    "ConfigError",
    "ContractError",
    "EmptyBagError",
    "GenerationError",
    "MivpgConfig",
    "MivpgError",
    "MivpgParams",
    "Rng",
    "ShapeError",
    "TrainingError",
    "flatten_baseline_forward",
    "init_params",
    "mivpg_forward",
]
