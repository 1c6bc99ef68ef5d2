from .config import ConfigError, ExperimentConfig, TaskSpec
from .corpus import training_corpus

__all__ = ["ConfigError", "ExperimentConfig", "TaskSpec", "training_corpus"]
