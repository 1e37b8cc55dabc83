"""Latency-aware architecture search, attention-augmented training, and
ensemble evaluation for small residual 3D CNNs on synthetic volumetric data."""

from .archspace import ArchSpec, SpaceConstraints, enumerate_space, format_spec, parse_spec
from .network import NetConfig, build_network, count_params, load_checkpoint, save_checkpoint
from .popsearch import (SearchState, TrainedRecord, measure_latency, narrower_leq,
                        pareto_frontier, pop_search)
from .traineval import ConfusionCounts, confusion_metrics, dbi, ensemble_predict, train_model

__all__ = [
    "ArchSpec", "SpaceConstraints", "enumerate_space", "format_spec", "parse_spec",
    "NetConfig", "build_network", "count_params", "load_checkpoint", "save_checkpoint",
    "SearchState", "TrainedRecord", "measure_latency", "narrower_leq",
    "pareto_frontier", "pop_search",
    "ConfusionCounts", "confusion_metrics", "dbi", "ensemble_predict", "train_model",
]
__version__ = "0.1.0"
