"""Learnable soft-prompt table: a shared prefix plus one vector per primitive.

The prompt for a composition (s, o) is the ordered embedding sequence
[prefix_0, ..., prefix_{p-1}, state_s, object_o]. Everything is trainable;
there is no frozen portion and no discrete vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor2, concat_rows, select_rows
from .errors import InvariantError


@dataclass(eq=False)
class PromptTable:
    prefix: Tensor2
    state_emb: Tensor2
    object_emb: Tensor2

    def __post_init__(self):
        d = self.state_emb.cols
        if self.object_emb.cols != d or self.prefix.cols != d:
            raise InvariantError("prompt table vectors must share one embedding dimension")

    @property
    def embed_dim(self):
        return self.state_emb.cols

    @property
    def prefix_length(self):
        return self.prefix.rows

    def parameters(self):
        return {
            "prompt.prefix": self.prefix,
            "prompt.state_emb": self.state_emb,
            "prompt.object_emb": self.object_emb,
        }


def init_table(space, embed_dim, prefix_length=3, seed=0):
    """Draw a fresh table with i.i.d. zero-mean entries of scale 1/sqrt(dim)."""
    if embed_dim < 1:
        raise InvariantError("embed_dim must be >= 1")
    if prefix_length < 0:
        raise InvariantError("prefix_length must be >= 0")
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(embed_dim)

    def draw(rows, name):
        return Tensor2(
            rng.normal(0.0, scale, size=(rows, embed_dim)), requires_grad=True, name=name
        )

    return PromptTable(
        prefix=draw(prefix_length, "prompt.prefix"),
        state_emb=draw(space.num_states, "prompt.state_emb"),
        object_emb=draw(space.num_objects, "prompt.object_emb"),
    )


def build_prompts(table, pairs):
    """Embedding sequence per pair, each (prefix_length + 2) x embed_dim.

    The returned tensors share the table's rows through the graph, so
    gradients from any downstream loss land exactly on the rows a batch
    references.
    """
    n, m = table.state_emb.rows, table.object_emb.rows
    sequences = []
    for pair in pairs:
        s, o = pair
        if not (0 <= s < n and 0 <= o < m):
            raise InvariantError(f"pair ({s}, {o}) out of range for prompt table ({n}, {m})")
        sequences.append(
            concat_rows(
                (
                    table.prefix,
                    select_rows(table.state_emb, [s]),
                    select_rows(table.object_emb, [o]),
                )
            )
        )
    return sequences
