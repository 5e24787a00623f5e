"""Frozen feature towers standing in for a pretrained vision-language backbone.

Both encoders are deterministic maps whose parameters never receive
gradients. The text tower stays inside the compute graph so gradients can
flow *through* it into the prompt table; the image tower consumes raw
feature vectors (data, not parameters) and can therefore run in plain
numpy and emit constant tensors.

Text: mean-pool the prompt sequence, apply a frozen dense map, normalize.
Image: one frozen dense head per token (default 4), each token normalized;
the global feature is the normalized token mean. A single-head identity
encoder turns the raw input into its own (passthrough) feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import NORM_EPSILON, Tensor2, concat_rows, l2_normalize_rows, matmul, mean_rows
from .errors import InvariantError, NumericalError


@dataclass(eq=False)
class TextEncoder:
    weight: Tensor2  # embed_dim x feature_dim, requires_grad is always False

    def __post_init__(self):
        if self.weight.requires_grad:
            raise InvariantError("text encoder weight must be frozen")

    @property
    def embed_dim(self):
        return self.weight.rows

    @property
    def feature_dim(self):
        return self.weight.cols


@dataclass(eq=False)
class ImageEncoder:
    heads: tuple  # each input_dim x feature_dim ndarray, frozen by construction

    def __post_init__(self):
        if not self.heads:
            raise InvariantError("image encoder needs at least one head")
        shape = self.heads[0].shape
        for h in self.heads:
            if h.shape != shape:
                raise InvariantError("image encoder heads must share one shape")

    @property
    def input_dim(self):
        return self.heads[0].shape[0]

    @property
    def feature_dim(self):
        return self.heads[0].shape[1]

    @property
    def num_tokens(self):
        return len(self.heads)


def make_text_encoder(embed_dim, feature_dim, seed=0):
    rng = np.random.default_rng(seed)
    weight = rng.normal(0.0, 1.0 / np.sqrt(embed_dim), size=(embed_dim, feature_dim))
    return TextEncoder(Tensor2(weight, requires_grad=False, name="encoder.text.weight"))


def make_image_encoder(input_dim, feature_dim, num_tokens=4, seed=0):
    rng = np.random.default_rng(seed)
    heads = tuple(
        rng.normal(0.0, 1.0 / np.sqrt(input_dim), size=(input_dim, feature_dim))
        for _ in range(num_tokens)
    )
    return ImageEncoder(heads)


def passthrough_image_encoder(dim):
    """Single identity head: raw inputs become their own (normalized) features."""
    return ImageEncoder((np.eye(dim),))


def encode_text(encoder, sequences):
    """One unit-norm feature row per prompt sequence.

    Sequences must share one length; the result is differentiable with
    respect to the prompt embeddings but never touches the frozen map.
    """
    sequences = list(sequences)
    if not sequences:
        raise InvariantError("encode_text needs at least one sequence")
    length = sequences[0].rows
    for seq in sequences:
        if seq.rows != length:
            raise InvariantError("prompt sequences must share one length")
        if seq.cols != encoder.embed_dim:
            raise InvariantError(
                f"sequence dim {seq.cols} does not match encoder dim {encoder.embed_dim}"
            )
    pooled = concat_rows([mean_rows(seq) for seq in sequences])
    return l2_normalize_rows(matmul(pooled, encoder.weight))


def encode_image(encoder, raw_batch):
    """Global unit-norm features plus per-sample normalized token sequences.

    Returns (features, tokens): a batch x feature_dim constant tensor and a
    list of num_tokens x feature_dim constant tensors, one per sample.
    """
    raw = np.asarray(raw_batch, dtype=np.float64)
    if raw.ndim != 2:
        raise InvariantError(f"raw image batch must be 2-D, got ndim={raw.ndim}")
    if raw.shape[1] != encoder.input_dim:
        raise InvariantError(
            f"raw feature dim {raw.shape[1]} does not match encoder input dim {encoder.input_dim}"
        )
    if not np.all(np.isfinite(raw)):
        raise NumericalError("non-finite raw image features")
    # batch x num_tokens x feature_dim
    stacked = np.stack([raw @ head for head in encoder.heads], axis=1)
    norms = np.linalg.norm(stacked, axis=2, keepdims=True)
    if np.any(norms <= NORM_EPSILON):
        raise NumericalError("zero-norm image token")
    unit_tokens = stacked / norms
    pooled = unit_tokens.mean(axis=1)
    pooled_norms = np.linalg.norm(pooled, axis=1, keepdims=True)
    if np.any(pooled_norms <= NORM_EPSILON):
        raise NumericalError("zero-norm pooled image feature")
    features = Tensor2(pooled / pooled_norms)
    tokens = [Tensor2(unit_tokens[b]) for b in range(raw.shape[0])]
    return features, tokens
