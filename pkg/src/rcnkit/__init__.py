"""Multi-path refinement contour detection: a numpy autodiff core, the
refinement graph, training, corpus forging, and the boundary benchmark."""

from .bench import BenchmarkSummary, benchmark, correspond, correspond_multi, nms_thin
from .estimator import ContourThinner, RefineContourNet
from .forge import LabelMap, SegmentationMask, enrich_labels, mask_to_contours, synth_corpus, synth_images
from .graph import NetworkSpec, RCNGraph, build_rcn, desk_spec
from .tensor import ParameterStore, Tensor, backward, load_checkpoint, save_checkpoint
from .training import AugmentConfig, LossConfig, TrainPlan, TrainStage, run_stage, weighted_logistic_loss

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "BenchmarkSummary",
    "ContourThinner",
    "LabelMap",
    "LossConfig",
    "NetworkSpec",
    "ParameterStore",
    "RCNGraph",
    "RefineContourNet",
    "SegmentationMask",
    "Tensor",
    "TrainPlan",
    "TrainStage",
    "backward",
    "benchmark",
    "build_rcn",
    "correspond",
    "correspond_multi",
    "desk_spec",
    "enrich_labels",
    "load_checkpoint",
    "mask_to_contours",
    "nms_thin",
    "run_stage",
    "save_checkpoint",
    "synth_corpus",
    "synth_images",
    "weighted_logistic_loss",
]
