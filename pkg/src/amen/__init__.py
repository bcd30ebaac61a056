"""Click-through-rate model with a moveline reward branch and temporal pairwise training."""

from .data import (DatasetMeta, Impression, ImpressionTable, ItemFeatures, MovelineNode,
                   SceneKind, load_table, read_dataset, write_dataset)
from .estimator import AMENClassifier, TSPPairer
from .harness import ExperimentConfig
from .metrics import auc, gauc, reward_distribution
from .simulator import SimConfig, simulate

__version__ = "0.1.0"

__all__ = ["AMENClassifier", "DatasetMeta", "ExperimentConfig", "Impression", "ImpressionTable",
           "ItemFeatures", "MovelineNode", "SceneKind", "SimConfig", "TSPPairer", "auc", "gauc",
           "load_table", "read_dataset", "reward_distribution", "simulate", "write_dataset"]
