"""Semantic-pixel alignment: cross-attention and LM input assembly.

Semantic patch embeddings query the (projected) pixel embeddings; the
attended result is added back onto the semantic stream and normalized.
The LM consumes [semantic | aligned | text] in exactly that order.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoders import FeatureMap
from .layers import LayerNorm, MultiHeadAttention
from .lm import ContextOverflowError, MicroLM


class AlignmentModule:
    def __init__(self, rng: np.random.Generator, dim: int = 64, n_heads: int = 4):
        self.dim = dim
        self.mha = MultiHeadAttention(dim, n_heads, rng)
        self.norm = LayerNorm(dim)

    def align(self, f_s: FeatureMap, f_p: FeatureMap) -> FeatureMap:
        if f_s.dim != self.dim or f_p.dim != self.dim:
            raise T.ShapeError(f"align expects dim {self.dim}, got {f_s.dim}/{f_p.dim}")
        attended = self.mha(f_s.data, f_p.data, f_p.data)
        out = self.norm(T.add(f_s.data, attended))
        return FeatureMap(f_s.tokens, self.dim, f_s.grid, out)

    def pre_residual(self, f_s: FeatureMap, f_p: FeatureMap) -> T.Tensor:
        """The bare attended output, before residual and norm (for probes)."""
        return self.mha(f_s.data, f_p.data, f_p.data)

    def attention_weights(self, f_s: FeatureMap, f_p: FeatureMap) -> np.ndarray:
        return self.mha.attention_weights(f_s.data, f_p.data)

    def params(self, prefix: str):
        return self.mha.params(f"{prefix}.mha") + self.norm.params(f"{prefix}.norm")


def assemble_llm_input(f_s: FeatureMap, f_align: FeatureMap | None,
                       text_ids, lm: MicroLM) -> tuple[T.Tensor, int]:
    """Concat [f_s | f_align | embedded text]; returns (sequence, image length).

    f_align may be None (alignment-free variant), shrinking the prefix to
    just the semantic tokens.
    """
    parts = [f_s.data]
    n_img = f_s.tokens
    if f_align is not None:
        parts.append(f_align.data)
        n_img += f_align.tokens
    ids = list(text_ids)
    if ids:
        parts.append(lm.embed_text(ids))
    total = n_img + len(ids)
    if total > lm.cfg.n_ctx:
        raise ContextOverflowError(f"sequence length {total} > context {lm.cfg.n_ctx}")
    return T.concat_tokens(parts), n_img
