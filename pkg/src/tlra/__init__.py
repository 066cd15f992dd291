"""Two-level reference alignment for multimodal sentiment under missing modalities."""

from .data import FeatureBundle, MissingPattern, Modality, load_bundle, synth_generate
from .harness import binary_metrics, evaluate_patterns, export_similarity
from .model import Stage, TLRAModel, forward
from .trainer import TrainerConfig, run_training

__all__ = [
    "FeatureBundle",
    "MissingPattern",
    "Modality",
    "Stage",
    "TLRAModel",
    "TrainerConfig",
    "binary_metrics",
    "evaluate_patterns",
    "export_similarity",
    "forward",
    "load_bundle",
    "run_training",
    "synth_generate",
]
