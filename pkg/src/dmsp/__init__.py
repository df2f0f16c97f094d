"""Multi-source spatial prediction with learned per-source fidelity scores."""

from .data import MultiSourceDataset, ScrConfig, SourceDataset, generate_scr, load_csv, mask_target, split
from .fidelity import logits_from_scores, scores_from_logits
from .geometry import build_knn_graph, edge_angle, knn_indices
from .metrics import MetricsReport, evaluate, evaluate_model
from .model import forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, fit

__version__ = "0.1.0"

__all__ = [
    "MultiSourceDataset", "ScrConfig", "SourceDataset", "generate_scr", "load_csv", "mask_target", "split",
    "logits_from_scores", "scores_from_logits", "build_knn_graph", "edge_angle", "knn_indices",
    "MetricsReport", "evaluate", "evaluate_model", "forward", "init_params", "load_checkpoint",
    "save_checkpoint", "TrainConfig", "fit",
]
