"""Training objective: pair, primitive, and prompt cross-entropies.

All three terms are batch-averaged softmax cross-entropies over
temperature-scaled cosine logits. The total is the pair-fusion loss plus
alpha times the primitive loss plus beta times the prompt loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .autodiff import (
    add,
    cross_entropy_mean,
    l2_normalize_rows,
    matmul,
    scalar_mul,
    transpose,
)
from .errors import InvariantError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.01
    beta: float = 0.1

    def __post_init__(self):
        for name, value in (("alpha", self.alpha), ("beta", self.beta)):
            if not math.isfinite(value) or value < 0:
                raise InvariantError(f"{name} must be finite and >= 0, got {value}")


@dataclass(frozen=True)
class LossBreakdown:
    l_dfm: float
    l_st_obj: float
    l_spm: float
    total: float


def scaled_cosine_logits(image_features, class_features, temperature):
    """(1/temperature) * image_features @ class_features^T."""
    if temperature <= 0:
        raise InvariantError("temperature must be positive")
    return scalar_mul(matmul(image_features, transpose(class_features)), 1.0 / temperature)


def loss_spm(image_features, text_features, labels, temperature):
    """Cross-entropy of the prompt branch: image vs pair text features."""
    return cross_entropy_mean(
        scaled_cosine_logits(image_features, text_features, temperature), labels
    )


def loss_st_obj(image_features, state_features, object_features, state_labels,
                object_labels, temperature):
    """State cross-entropy plus object cross-entropy on decomposed features.

    The decomposed rows are means of unit vectors, so they are normalized
    here before scoring to keep every logit a scaled cosine.
    """
    state_term = cross_entropy_mean(
        scaled_cosine_logits(image_features, l2_normalize_rows(state_features), temperature),
        state_labels,
    )
    object_term = cross_entropy_mean(
        scaled_cosine_logits(image_features, l2_normalize_rows(object_features), temperature),
        object_labels,
    )
    return add(state_term, object_term)


def loss_dfm(pair_logits, labels):
    """Cross-entropy on the fused pair logits (already temperature-scaled)."""
    return cross_entropy_mean(pair_logits, labels)


def total_loss(l_dfm, l_st_obj, l_spm, weights):
    """total = l_dfm + alpha * l_st_obj + beta * l_spm.

    Returns the differentiable total plus a float breakdown. With
    alpha = beta = 0 the total equals l_dfm exactly, including gradients.
    """
    total = add(
        l_dfm, add(scalar_mul(l_st_obj, weights.alpha), scalar_mul(l_spm, weights.beta))
    )
    return total, LossBreakdown(l_dfm.item(), l_st_obj.item(), l_spm.item(), total.item())
