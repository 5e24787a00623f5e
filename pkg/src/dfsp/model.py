"""End-to-end forward pass wiring prompts, frozen encoders, and fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor2, concat_rows, select_rows
from .composition import pair_index
from .encoders import (
    ImageEncoder,
    TextEncoder,
    encode_image,
    encode_text,
    make_image_encoder,
    make_text_encoder,
)
from .errors import InvariantError
from .fusion import (
    FusionParams,
    decompose,
    fuse,
    init_fusion_params,
    pair_scores,
    split_decomposed,
)
from .losses import scaled_cosine_logits
from .prompts import PromptTable, build_prompts, init_table

# Fixed offsets from the run seed, one per independently initialized part.
_PROMPT_SEED, _FUSION_SEED, _TEXT_SEED, _IMAGE_SEED = 1, 2, 3, 4


@dataclass(eq=False)
class ForwardPass:
    """Everything one batch forward produces.

    text_features: candidate-pair prompt features (|pairs| x d_f, unit rows)
    image_features: global image features (batch x d_f, unit rows, constant)
    state_features / object_features: pre-fusion decomposed rows (or None)
    pair_logits: fused pair logits (batch x |pairs|, or None without fusion)
    """

    text_features: Tensor2
    image_features: Tensor2
    state_features: Tensor2 | None
    object_features: Tensor2 | None
    pair_logits: Tensor2 | None

    def spm_logits(self, temperature):
        return scaled_cosine_logits(self.image_features, self.text_features, temperature)


@dataclass(eq=False)
class DfspModel:
    space: object
    pair_idx: object
    prompts: PromptTable
    fusion: FusionParams
    text_encoder: TextEncoder
    image_encoder: ImageEncoder
    variant: str
    temperature: float
    spm_only: bool = False

    @classmethod
    def build(cls, space, input_dim, config):
        """Deterministically initialize every part from the run seed."""
        prompts = init_table(
            space, config.prompt_dim, config.prefix_length, seed=config.seed + _PROMPT_SEED
        )
        fusion = init_fusion_params(
            config.feature_dim, config.num_blocks, seed=config.seed + _FUSION_SEED
        )
        text_encoder = make_text_encoder(
            config.prompt_dim, config.feature_dim, seed=config.seed + _TEXT_SEED
        )
        image_encoder = make_image_encoder(
            input_dim,
            config.feature_dim,
            config.num_image_tokens,
            seed=config.seed + _IMAGE_SEED,
        )
        return cls(
            space=space,
            pair_idx=pair_index(space),
            prompts=prompts,
            fusion=fusion,
            text_encoder=text_encoder,
            image_encoder=image_encoder,
            variant=config.variant,
            temperature=config.temperature,
            spm_only=config.spm_only,
        )

    def trainable(self):
        """Name -> tensor map of everything the optimizer may touch."""
        params = dict(self.prompts.parameters())
        if not self.spm_only:
            params.update(self.fusion.parameters())
        return params

    def all_parameters(self):
        """Trainable plus frozen arrays, for checkpointing."""
        arrays = {name: t.data for name, t in self.prompts.parameters().items()}
        arrays.update({name: t.data for name, t in self.fusion.parameters().items()})
        arrays["encoder.text.weight"] = self.text_encoder.weight.data
        for j, head in enumerate(self.image_encoder.heads):
            arrays[f"encoder.image.head{j}"] = head
        return arrays

    def forward(self, raw_features, candidate_pairs=None, with_fusion=True):
        """Score a batch of raw image features against candidate pairs.

        Candidates default to the seen pairs (the training class set).
        Decomposition always averages the seen-pair text features, so the
        fused branch stays consistent between training and inference.
        """
        pairs = tuple(candidate_pairs) if candidate_pairs is not None else self.space.seen_pairs
        if not pairs:
            raise InvariantError("forward needs at least one candidate pair")
        text_features = encode_text(self.text_encoder, build_prompts(self.prompts, pairs))
        image_features, tokens = encode_image(self.image_encoder, raw_features)
        if self.spm_only or not with_fusion:
            return ForwardPass(text_features, image_features, None, None, None)

        n, m = self.space.num_states, self.space.num_objects
        if pairs == self.space.seen_pairs:
            seen_text = text_features
        else:
            seen_text = encode_text(
                self.text_encoder, build_prompts(self.prompts, self.space.seen_pairs)
            )
        decomposed = decompose(seen_text, self.pair_idx, n, m)
        state_features, object_features = split_decomposed(decomposed, n, m)

        rows = []
        for b in range(image_features.rows):
            fused = fuse(decomposed, tokens[b], self.fusion, self.variant)
            rows.append(
                pair_scores(
                    fused,
                    text_features,
                    select_rows(image_features, [b]),
                    pairs,
                    n,
                    m,
                    self.fusion.recompose_mlp,
                    self.temperature,
                )
            )
        pair_logits = concat_rows(rows) if len(rows) > 1 else rows[0]
        return ForwardPass(
            text_features, image_features, state_features, object_features, pair_logits
        )

    def scores(self, raw_features, candidate_pairs):
        """Plain-array logits for evaluation (SPM scores when spm_only)."""
        fw = self.forward(raw_features, candidate_pairs, with_fusion=not self.spm_only)
        if self.spm_only:
            return fw.spm_logits(self.temperature).data.copy()
        return fw.pair_logits.data.copy()


def model_from_arrays(space, arrays, config):
    """Rebuild a model from named parameter arrays (checkpoint contents)."""
    def tensor(name, trainable=True):
        if name not in arrays:
            raise InvariantError(f"missing parameter {name!r} in checkpoint")
        return Tensor2(arrays[name], requires_grad=trainable, name=name)

    prompts = PromptTable(
        prefix=tensor("prompt.prefix"),
        state_emb=tensor("prompt.state_emb"),
        object_emb=tensor("prompt.object_emb"),
    )
    if prompts.state_emb.rows != space.num_states or prompts.object_emb.rows != space.num_objects:
        raise InvariantError(
            f"checkpoint prompt table ({prompts.state_emb.rows} states, "
            f"{prompts.object_emb.rows} objects) does not match the space "
            f"({space.num_states}, {space.num_objects})"
        )
    fusion = init_fusion_params(config.feature_dim, config.num_blocks)
    for name, tensor_param in fusion.parameters().items():
        if name not in arrays:
            raise InvariantError(f"missing parameter {name!r} in checkpoint")
        loaded = np.asarray(arrays[name], dtype=np.float64)
        if loaded.shape != tensor_param.data.shape:
            raise InvariantError(f"parameter {name!r} has shape {loaded.shape}, "
                                 f"expected {tensor_param.data.shape}")
        tensor_param.data = loaded.copy()
    text_encoder = TextEncoder(tensor("encoder.text.weight", trainable=False))
    heads = []
    j = 0
    while f"encoder.image.head{j}" in arrays:
        heads.append(np.asarray(arrays[f"encoder.image.head{j}"], dtype=np.float64))
        j += 1
    if not heads:
        raise InvariantError("checkpoint has no image encoder heads")
    image_encoder = ImageEncoder(tuple(heads))
    return DfspModel(
        space=space,
        pair_idx=pair_index(space),
        prompts=prompts,
        fusion=fusion,
        text_encoder=text_encoder,
        image_encoder=image_encoder,
        variant=config.variant,
        temperature=config.temperature,
        spm_only=config.spm_only,
    )
