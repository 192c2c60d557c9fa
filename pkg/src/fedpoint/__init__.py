"""Federated point-transformer classification of slide-level point clouds."""

from .estimator import FederatedPointTransformer, PointTransformerClassifier
from .fed_sim import FedConfig, SiteData, run
from .model import ModelConfig, ModelWeights, forward, init_weights
from .point_ops import PointSet, fcs, fps

__version__ = "0.1.0"

__all__ = [
    "FederatedPointTransformer",
    "PointTransformerClassifier",
    "FedConfig",
    "SiteData",
    "run",
    "ModelConfig",
    "ModelWeights",
    "forward",
    "init_weights",
    "PointSet",
    "fcs",
    "fps",
]
