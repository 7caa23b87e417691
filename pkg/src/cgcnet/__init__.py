"""Cell-graph convolutional classification of tissue images."""

from .graph import CellGraph, EdgeConfig, SamplerConfig, assemble_graph
from .model import ModelConfig, forward
from .training import TrainConfig, evaluate, majority_vote, train

__version__ = "0.1.0"

__all__ = [
    "CellGraph",
    "EdgeConfig",
    "ModelConfig",
    "SamplerConfig",
    "TrainConfig",
    "assemble_graph",
    "evaluate",
    "forward",
    "majority_vote",
    "train",
]
