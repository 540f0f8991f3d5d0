"""Multi-agent global trajectory and local pose forecasting on a small numpy autograd."""

from .model import Forecaster, ModelConfig
from .motion import GlobalPoseSequence, ScenarioConfig, Skeleton, decompose, recompose
from .pose_decoder import ForecastBundle

__version__ = "0.1.0"

__all__ = ["Forecaster", "ModelConfig", "GlobalPoseSequence", "ScenarioConfig", "Skeleton", "decompose",
           "recompose", "ForecastBundle", "__version__"]
