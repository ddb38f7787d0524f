"""End-to-end single-stage pipeline: synthetic corpus, training, alignment, tuning, decoding."""

from .config import ConfigError, load_config
from .train import PipelineError

__all__ = ["ConfigError", "PipelineError", "load_config"]
