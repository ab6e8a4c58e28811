"""Memory-driven quality assessment with full-reference and no-reference modes."""

__version__ = "0.1.0"

from .estimator import MQAFRegressor
from .fusion import FR, NR, quality_score
from .model import ModelConfig, ModelState, init_model, score_batch

__all__ = ["FR", "NR", "MQAFRegressor", "ModelConfig", "ModelState", "init_model", "quality_score", "score_batch"]
