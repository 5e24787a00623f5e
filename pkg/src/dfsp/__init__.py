"""Desk-scale compositional zero-shot learning.

A numpy-only engine built around three ideas: fully learnable soft
prompts over state-object compositions, decomposition of the pair text
features into per-primitive features that are fused with image tokens
through cross/self-attention, and the generalized closed/open-world
evaluation protocol (bias-swept seen/unseen accuracies, harmonic mean,
AUC, and feasibility-filtered open-world candidate sets).

Everything trains through a small reverse-mode autodiff core with a
finite-difference oracle, so every gradient in the pipeline is checkable.
"""

from .autodiff import Tensor2, grad_check
from .composition import CompositionSpace, PairIndex, build_space, pair_index
from .data import SampleStore, SyntheticSpec, generate_synthetic, load_manifest, write_manifest
from .encoders import (
    ImageEncoder,
    TextEncoder,
    encode_image,
    encode_text,
    make_image_encoder,
    make_text_encoder,
    passthrough_image_encoder,
)
from .errors import InvariantError, NumericalError
from .evaluation import (
    FeasibilityScores,
    MetricsReport,
    bias_sweep,
    evaluate_checkpoint,
    feasibility_filter,
    predict,
)
from .fusion import (
    FusionParams,
    cross_attend,
    decompose,
    fuse,
    init_fusion_params,
    pair_scores,
    recompose,
    self_attend,
    split_decomposed,
)
from .losses import LossBreakdown, LossWeights, loss_dfm, loss_spm, loss_st_obj, total_loss
from .model import DfspModel
from .prompts import PromptTable, build_prompts, init_table
from .training import Checkpoint, TrainConfig, adam_step, model_from_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "Tensor2",
    "grad_check",
    "CompositionSpace",
    "PairIndex",
    "build_space",
    "pair_index",
    "SampleStore",
    "SyntheticSpec",
    "generate_synthetic",
    "load_manifest",
    "write_manifest",
    "ImageEncoder",
    "TextEncoder",
    "encode_image",
    "encode_text",
    "make_image_encoder",
    "make_text_encoder",
    "passthrough_image_encoder",
    "InvariantError",
    "NumericalError",
    "FeasibilityScores",
    "MetricsReport",
    "bias_sweep",
    "evaluate_checkpoint",
    "feasibility_filter",
    "predict",
    "FusionParams",
    "cross_attend",
    "decompose",
    "fuse",
    "init_fusion_params",
    "pair_scores",
    "recompose",
    "self_attend",
    "split_decomposed",
    "LossBreakdown",
    "LossWeights",
    "loss_dfm",
    "loss_spm",
    "loss_st_obj",
    "total_loss",
    "DfspModel",
    "PromptTable",
    "build_prompts",
    "init_table",
    "Checkpoint",
    "TrainConfig",
    "adam_step",
    "model_from_checkpoint",
    "train",
]
