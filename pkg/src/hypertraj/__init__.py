"""Coarse-to-fine multimodal trajectory prediction with hypergraph interaction,
staged training, evaluation metrics and a prediction-conditioned planner."""
from .errors import HypertrajError
from .model import ModelConfig, ModelOutput, TrajectoryPredictor
from .scene import AgentTrack, LaneSegment, Scene
from .training import Dataset, StageConfig, evaluate, predict, run_stage

__all__ = [
    "AgentTrack",
    "Dataset",
    "HypertrajError",
    "LaneSegment",
    "ModelConfig",
    "ModelOutput",
    "Scene",
    "StageConfig",
    "TrajectoryPredictor",
    "evaluate",
    "predict",
    "run_stage",
]
__version__ = "0.1.0"
