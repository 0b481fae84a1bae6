"""Multimodal tissue classification for spatial transcriptomics spots.

Pairs per-spot morphology feature vectors with spatial gene expression:
a similarity-weighted microenvironment graph encodes local context, gene
expression is lifted to clinical and learnable pathway activations, a
cross-attention transformer fuses the modalities, and gated late fusion
feeds a weighted cross-entropy classifier. High-confidence predictions then
drive rank-sum differential expression analysis.
"""

from .autodiff import Parameter, Tensor, backward, finite_diff_check, no_grad
from .data import (
    Dataset,
    GenePanel,
    PathwayDb,
    SpotRecord,
    load_dataset,
    parse_gmt,
    preprocess_expression,
    write_gmt,
)
from .estimator import TissueClassifier
from .metrics import MetricsBundle, compute_metrics
from .synth import SynthConfig, synth_generate
from .training import TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "GenePanel",
    "MetricsBundle",
    "Parameter",
    "PathwayDb",
    "SpotRecord",
    "SynthConfig",
    "Tensor",
    "TissueClassifier",
    "TrainConfig",
    "backward",
    "compute_metrics",
    "evaluate",
    "finite_diff_check",
    "load_dataset",
    "no_grad",
    "parse_gmt",
    "preprocess_expression",
    "synth_generate",
    "train",
    "write_gmt",
]
