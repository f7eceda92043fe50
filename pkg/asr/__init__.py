from asr.config import ExperimentConfig, load_config, set_logging
from asr.errors import AsrError, ConfigurationError, ContractError, DimensionError, TrainingDivergedError
from asr.model import AsrModel, BaselineModel, StructuredLatent, build_model, load_model, save_model
from asr.renderer import render_scene, scale_configs
from asr.training import RunSpec, train

__version__ = "1.0.0"

__all__ = [
    "AsrError",
    "AsrModel",
    "BaselineModel",
    "ConfigurationError",
    "ContractError",
    "DimensionError",
    "ExperimentConfig",
    "RunSpec",
    "StructuredLatent",
    "TrainingDivergedError",
    "build_model",
    "load_config",
    "load_model",
    "render_scene",
    "save_model",
    "scale_configs",
    "set_logging",
    "train",
]
