"""Counterfactual neighborhood augmentation for graph anomaly detection."""

from .tensor import Tensor, Adam, AdamState, adam_step, no_grad
from .graph import (Graph, NeighborSequence, Splits, SyntheticSpec,
                    average_degree, generate_synthetic, load_graph,
                    make_splits, neighbor_sequence, sequence_length)
from .layers import (ClassifierHead, GatLayer, GcnLayer, anomaly_weight,
                     gat_attention, gat_forward, gcn_forward,
                     weighted_ce_loss)
from .pointer import (CounterfactualPlan, DetectionReport, PointerNet,
                      calibrate_eta, detect, select_sources, train_pointer)
from .diffusion import (DiffusionSchedule, NoisePredictor, forward_sample,
                        high_pass, make_schedule, reverse_step, sample,
                        train_ddpm, translate)
from .metrics import auc_pr, auc_roc, macro_f1
from .pipeline import (PipelineConfig, PipelineState, RunResult,
                       counterfactual_forward, evaluate, load_state,
                       save_state, train)

__version__ = "0.1.0"

__all__ = [
    "Tensor", "Adam", "AdamState", "adam_step", "no_grad",
    "Graph", "NeighborSequence", "Splits", "SyntheticSpec",
    "average_degree", "generate_synthetic", "load_graph", "make_splits",
    "neighbor_sequence", "sequence_length",
    "ClassifierHead", "GatLayer", "GcnLayer", "anomaly_weight",
    "gat_attention", "gat_forward", "gcn_forward", "weighted_ce_loss",
    "CounterfactualPlan", "DetectionReport", "PointerNet", "calibrate_eta",
    "detect", "select_sources", "train_pointer",
    "DiffusionSchedule", "NoisePredictor", "forward_sample", "high_pass",
    "make_schedule", "reverse_step", "sample", "train_ddpm", "translate",
    "auc_pr", "auc_roc", "macro_f1",
    "PipelineConfig", "PipelineState", "RunResult", "counterfactual_forward",
    "evaluate", "load_state", "save_state", "train",
]
