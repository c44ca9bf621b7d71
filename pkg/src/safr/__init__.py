"""Superposition-aware feature regularization for a single-layer transformer classifier."""

from .metrics import (
    RepresentationMatrix, capacity, cosine_matrix, interference_matrix,
    metrics_report, polysemanticity,
)
from .model import Checkpoint, ForwardTrace, ModelConfig, SafrClassifier
from .train import TrainConfig, train

__version__ = "0.1.0"
