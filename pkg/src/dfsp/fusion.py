"""Decomposed cross-modal fusion.

The language features of the seen pairs are averaged per primitive into
state rows and object rows (decomposition), pushed through K blocks of
cross-attention followed by self-attention against the image tokens, and
recomposed into pair features by an elementwise product refined with a
residual MLP. Three fusion directions are supported:

- ``t2i``: decomposed text attends into the image tokens; the pooled
  fused image feature is scored against the prompt pair features.
- ``i2t``: image tokens attend into the decomposed text; the recomposed
  fused pair features are scored against the global image feature.
- ``BiF``: both directions, with the fused image side scored against the
  recomposed fused text side.

Parameter count depends only on the feature width and block count, never
on how many compositions exist: decomposition keeps the trainable surface
at the primitive scale (n + m) instead of the pair scale (n x m).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    Tensor2,
    concat_rows,
    elementwise_mul,
    l2_normalize_rows,
    matmul,
    mean_rows,
    mean_rows_by_group,
    mlp_apply,
    scalar_mul,
    select_rows,
    softmax_rows,
    transpose,
)
from .errors import InvariantError

VARIANTS = ("t2i", "i2t", "BiF")


@dataclass(eq=False)
class AttentionWeights:
    query: Tensor2
    key: Tensor2
    value: Tensor2


@dataclass(eq=False)
class FusionBlock:
    cross: AttentionWeights
    self_attn: AttentionWeights


@dataclass(eq=False)
class RecomposeMlp:
    hidden_weight: Tensor2
    hidden_bias: Tensor2
    out_weight: Tensor2
    out_bias: Tensor2

    def apply(self, x):
        return mlp_apply(x, self.hidden_weight, self.hidden_bias, self.out_weight, self.out_bias)


@dataclass(eq=False)
class FusionParams:
    text_to_image: Tensor2
    image_to_text: Tensor2
    blocks: tuple
    recompose_mlp: RecomposeMlp

    def parameters(self):
        params = {
            "fusion.text_to_image": self.text_to_image,
            "fusion.image_to_text": self.image_to_text,
        }
        for k, block in enumerate(self.blocks):
            for role, weights in (("cross", block.cross), ("self", block.self_attn)):
                params[f"fusion.block{k}.{role}.query"] = weights.query
                params[f"fusion.block{k}.{role}.key"] = weights.key
                params[f"fusion.block{k}.{role}.value"] = weights.value
        mlp = self.recompose_mlp
        params["fusion.mlp.hidden_weight"] = mlp.hidden_weight
        params["fusion.mlp.hidden_bias"] = mlp.hidden_bias
        params["fusion.mlp.out_weight"] = mlp.out_weight
        params["fusion.mlp.out_bias"] = mlp.out_bias
        return params

    def num_trainable(self):
        return sum(p.data.size for p in self.parameters().values())


@dataclass(eq=False)
class FusedFeatures:
    """Output of one fusion stack on one sample; absent sides are None."""

    text_rows: Tensor2 | None
    image_tokens: Tensor2 | None


def init_fusion_params(feature_dim, num_blocks=1, seed=0):
    """Trainable fusion stack: identity modality maps, random attention,
    and a recompose MLP whose output layer starts at zero (identity map)."""
    if num_blocks < 1:
        raise InvariantError("num_blocks must be >= 1")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(feature_dim)

    def weight(name):
        return Tensor2(
            rng.normal(0.0, scale, size=(feature_dim, feature_dim)),
            requires_grad=True,
            name=name,
        )

    def attention(prefix):
        return AttentionWeights(
            weight(f"{prefix}.query"), weight(f"{prefix}.key"), weight(f"{prefix}.value")
        )

    blocks = tuple(
        FusionBlock(
            cross=attention(f"fusion.block{k}.cross"),
            self_attn=attention(f"fusion.block{k}.self"),
        )
        for k in range(num_blocks)
    )
    mlp = RecomposeMlp(
        hidden_weight=weight("fusion.mlp.hidden_weight"),
        hidden_bias=Tensor2(
            np.zeros((1, feature_dim)), requires_grad=True, name="fusion.mlp.hidden_bias"
        ),
        out_weight=Tensor2(
            np.zeros((feature_dim, feature_dim)), requires_grad=True, name="fusion.mlp.out_weight"
        ),
        out_bias=Tensor2(
            np.zeros((1, feature_dim)), requires_grad=True, name="fusion.mlp.out_bias"
        ),
    )
    return FusionParams(
        text_to_image=Tensor2(
            np.eye(feature_dim), requires_grad=True, name="fusion.text_to_image"
        ),
        image_to_text=Tensor2(
            np.eye(feature_dim), requires_grad=True, name="fusion.image_to_text"
        ),
        blocks=blocks,
        recompose_mlp=mlp,
    )


def decompose(text_features, pair_idx, num_states, num_objects):
    """Average the seen-pair text features per state and per object.

    Row layout of the result: states first (num_states rows), then objects
    (num_objects rows). Linear and differentiable; row count is n + m no
    matter how many seen pairs exist.
    """
    if text_features.rows != len(pair_idx):
        raise InvariantError(
            f"decompose needs one feature row per seen pair: "
            f"{text_features.rows} rows vs {len(pair_idx)} pairs"
        )
    state_means = mean_rows_by_group(text_features, pair_idx.state_idx, num_states)
    object_means = mean_rows_by_group(text_features, pair_idx.object_idx, num_objects)
    return concat_rows((state_means, object_means))


def split_decomposed(decomposed, num_states, num_objects):
    """Undo the concatenation: (state rows, object rows)."""
    if decomposed.rows != num_states + num_objects:
        raise InvariantError(
            f"expected {num_states + num_objects} decomposed rows, got {decomposed.rows}"
        )
    state_rows = select_rows(decomposed, np.arange(num_states))
    object_rows = select_rows(decomposed, num_states + np.arange(num_objects))
    return state_rows, object_rows


def recompose(decomposed, pairs, num_states, num_objects, mlp):
    """Rebuild pair features: MLP(state_row * object_row) per requested pair."""
    if decomposed.rows != num_states + num_objects:
        raise InvariantError(
            f"recompose input must have {num_states + num_objects} rows, got {decomposed.rows}"
        )
    state_sel = []
    object_sel = []
    for s, o in pairs:
        if not (0 <= s < num_states and 0 <= o < num_objects):
            raise InvariantError(f"pair ({s}, {o}) out of range in recompose")
        state_sel.append(s)
        object_sel.append(num_states + o)
    product = elementwise_mul(
        select_rows(decomposed, state_sel), select_rows(decomposed, object_sel)
    )
    return mlp.apply(product)


def cross_attend(source, target, weights):
    """Attend target queries over source keys/values.

    Output has one row per target token: softmax((target Wq)(source Wk)^T
    / sqrt(d)) @ (source Wv). Scaling by 1/sqrt(d) keeps logits tame.
    """
    if source.rows == 0 or target.rows == 0:
        raise InvariantError("cross_attend over an empty token set")
    q = matmul(target, weights.query)
    k = matmul(source, weights.key)
    v = matmul(source, weights.value)
    logits = scalar_mul(matmul(q, transpose(k)), 1.0 / math.sqrt(q.cols))
    return matmul(softmax_rows(logits), v)


def self_attend(tokens, weights):
    return cross_attend(tokens, tokens, weights)


def fuse(decomposed_text, image_tokens, params, variant):
    """Run every fusion block on one sample's image tokens.

    Each block converts the source side through the shared modality map,
    cross-attends, then self-attends the fused branch. ``BiF`` updates
    both branches in parallel from the pre-block values, sharing the
    block's attention weights across directions.
    """
    if variant not in VARIANTS:
        raise InvariantError(f"unknown fusion variant {variant!r}, expected one of {VARIANTS}")
    text = decomposed_text
    tokens = image_tokens
    for block in params.blocks:
        if variant == "t2i":
            source = matmul(text, params.text_to_image)
            tokens = self_attend(cross_attend(source, tokens, block.cross), block.self_attn)
        elif variant == "i2t":
            source = matmul(tokens, params.image_to_text)
            text = self_attend(cross_attend(source, text, block.cross), block.self_attn)
        else:
            text_source = matmul(text, params.text_to_image)
            token_source = matmul(tokens, params.image_to_text)
            new_tokens = cross_attend(text_source, tokens, block.cross)
            new_text = cross_attend(token_source, text, block.cross)
            tokens = self_attend(new_tokens, block.self_attn)
            text = self_attend(new_text, block.self_attn)
    if variant == "t2i":
        return FusedFeatures(text_rows=None, image_tokens=tokens)
    if variant == "i2t":
        return FusedFeatures(text_rows=text, image_tokens=None)
    return FusedFeatures(text_rows=text, image_tokens=tokens)


def pair_scores(fused, prompt_pair_features, image_feature, pairs, num_states, num_objects,
                mlp, temperature):
    """Temperature-scaled cosine logits for one sample over the given pairs.

    t2i pools the fused image tokens and scores them against the prompt
    pair features; i2t scores the global image feature against recomposed
    fused text; BiF pairs the two fused sides. Both sides of every dot
    product are unit-norm.
    """
    if temperature <= 0:
        raise InvariantError("temperature must be positive")
    if image_feature.rows != 1:
        raise InvariantError("pair_scores expects a single image feature row")
    if fused.image_tokens is not None:
        pooled = l2_normalize_rows(mean_rows(fused.image_tokens))
    if fused.text_rows is not None:
        recomposed = l2_normalize_rows(
            recompose(fused.text_rows, pairs, num_states, num_objects, mlp)
        )
    if fused.text_rows is None:
        if prompt_pair_features.rows != len(pairs):
            raise InvariantError(
                f"prompt pair features have {prompt_pair_features.rows} rows "
                f"for {len(pairs)} pairs"
            )
        logits = matmul(pooled, transpose(prompt_pair_features))
    elif fused.image_tokens is None:
        logits = matmul(image_feature, transpose(recomposed))
    else:
        logits = matmul(pooled, transpose(recomposed))
    return scalar_mul(logits, 1.0 / temperature)
