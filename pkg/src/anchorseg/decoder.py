"""Anchor-guided mask decoding: two-way attention blocks and the map heads.

Six 32-d rows (three learnable query tokens, three refined anchor embeddings)
talk to the 256 native pixel embeddings through two bidirectional blocks.
Every sublayer is residual with the norm inside the branch, so zeroed weights
leave both streams untouched.  Positional embeddings enter only the key/query
paths of the cross-attentions, never the residual streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .encoders import FeatureMap
from .layers import FeedForward, LayerNorm, MultiHeadAttention
from .lm import AnchorSet

D_DEC = 32
N_PIXEL_TOKENS = 256
DECODER_BLOCKS = 2
FUSE_ALPHA = 0.5
MASK_THRESHOLD = 0.5


class TwoWayBlock:
    def __init__(self, rng: np.random.Generator, dim: int = D_DEC, n_heads: int = 4):
        self.self_attn = MultiHeadAttention(dim, n_heads, rng)
        self.ln_self = LayerNorm(dim)
        self.cross_tp = MultiHeadAttention(dim, n_heads, rng)
        self.ln_tp = LayerNorm(dim)
        self.ffn = FeedForward(dim, 2 * dim, rng)
        self.ln_ffn = LayerNorm(dim)
        self.cross_pt = MultiHeadAttention(dim, n_heads, rng)
        self.ln_pt_q = LayerNorm(dim)
        self.ln_pt_kv = LayerNorm(dim)

    def __call__(self, z: T.Tensor, f: T.Tensor, pos: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        zn = self.ln_self(z)
        z = T.add(z, self.self_attn(zn, zn, zn))
        z = T.add(z, self.cross_tp(self.ln_tp(z), T.add(f, pos), f))
        z = T.add(z, self.ffn(self.ln_ffn(z)))
        f = T.add(f, self.cross_pt(T.add(self.ln_pt_q(f), pos), self.ln_pt_kv(z), z))
        return z, f

    def params(self, prefix: str):
        out = []
        for name, comp in (("self_attn", self.self_attn), ("ln_self", self.ln_self),
                           ("cross_tp", self.cross_tp), ("ln_tp", self.ln_tp),
                           ("ffn", self.ffn), ("ln_ffn", self.ln_ffn),
                           ("cross_pt", self.cross_pt), ("ln_pt_q", self.ln_pt_q),
                           ("ln_pt_kv", self.ln_pt_kv)):
            out.extend(comp.params(f"{prefix}.{name}"))
        return out


@dataclass
class DecodedMaps:
    """Flat 256-pixel probability tensors straight off the decoder heads."""

    p_seg: T.Tensor | None
    p_nor: T.Tensor | None
    p_ano: T.Tensor | None
    p_fused: T.Tensor
    grid: tuple[int, int]

    def realize(self) -> "ProbMaps":
        rows, cols = self.grid

        def grid_of(t):
            return None if t is None else t.data.reshape(rows, cols).copy()

        fused_grid = self.p_fused.data.reshape(rows, cols).copy()
        fused_full = upsample_bilinear(fused_grid, 4)
        return ProbMaps(
            p_seg=grid_of(self.p_seg), p_nor=grid_of(self.p_nor), p_ano=grid_of(self.p_ano),
            p_fused=fused_grid, p_full=fused_full,
            mask=binarize(fused_full),
        )


@dataclass
class ProbMaps:
    """Numpy view: 16x16 grids, the upsampled fused map, and the binary mask."""

    p_seg: np.ndarray | None
    p_nor: np.ndarray | None
    p_ano: np.ndarray | None
    p_fused: np.ndarray
    p_full: np.ndarray
    mask: np.ndarray


class MaskDecoder:
    def __init__(self, rng: np.random.Generator, heads: tuple[str, ...] = ("seg", "rel"),
                 dim: int = D_DEC, n_pixels: int = N_PIXEL_TOKENS, n_blocks: int = DECODER_BLOCKS):
        for h in heads:
            if h not in ("seg", "rel"):
                raise ValueError(f"unknown head {h!r}")
        if not heads:
            raise ValueError("decoder needs at least one head")
        self.heads = tuple(heads)
        self.dim = dim
        self.queries = T.param_normal(rng, (3, dim), 0.02)  # t_nor, t_ano, t_seg
        self.pixel_pos = T.param_normal(rng, (n_pixels, dim), 0.02)
        self.blocks = [TwoWayBlock(rng, dim) for _ in range(n_blocks)]

    def build_input(self, refined: AnchorSet) -> T.Tensor:
        """Z0 rows: [t_nor, t_ano, t_seg, r_nor, r_ano, r_seg]."""
        if refined.r_nor is None:
            raise ValueError("anchors not refined")
        return T.concat_tokens([self.queries, refined.r_nor, refined.r_ano, refined.r_seg])

    def decode(self, z0: T.Tensor, f_p_dec: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        z, f = z0, f_p_dec
        for block in self.blocks:
            z, f = block(z, f, self.pixel_pos)
        return z, f

    def mask_heads(self, z_l: T.Tensor, f_pp: T.Tensor) -> tuple[T.Tensor | None, T.Tensor | None, T.Tensor | None]:
        """(P_seg, P_nor, P_ano) flat maps from the updated query tokens."""
        f_t = T.transpose(f_pp)  # dim x pixels
        p_seg = p_nor = p_ano = None
        if "seg" in self.heads:
            t_seg = T.slice_rows(z_l, 2, 3)
            p_seg = T.reshape(T.sigmoid_map(T.matmul(t_seg, f_t)), (-1,))
        if "rel" in self.heads:
            t_nor = T.slice_rows(z_l, 0, 1)
            t_ano = T.slice_rows(z_l, 1, 2)
            logit_pair = T.concat_cols([
                T.transpose(T.matmul(t_nor, f_t)),
                T.transpose(T.matmul(t_ano, f_t)),
            ])  # pixels x 2
            soft = T.softmax_last_axis(logit_pair)
            p_nor = T.reshape(T.slice_cols(soft, 0, 1), (-1,))
            p_ano = T.reshape(T.slice_cols(soft, 1, 2), (-1,))
        return p_seg, p_nor, p_ano

    def forward(self, refined: AnchorSet, f_p_native: FeatureMap) -> DecodedMaps:
        if f_p_native.dim != self.dim:
            raise T.ShapeError(f"decoder expects native dim {self.dim}, got {f_p_native.dim}")
        z_l, f_pp = self.decode(self.build_input(refined), f_p_native.data)
        p_seg, p_nor, p_ano = self.mask_heads(z_l, f_pp)
        if p_seg is not None and p_ano is not None:
            fused = T.add(T.mul_scalar(p_seg, FUSE_ALPHA), T.mul_scalar(p_ano, 1.0 - FUSE_ALPHA))
        elif p_seg is not None:
            fused = p_seg
        else:
            fused = p_ano
        return DecodedMaps(p_seg=p_seg, p_nor=p_nor, p_ano=p_ano, p_fused=fused,
                           grid=f_p_native.grid)

    def params(self, prefix: str):
        out = [(f"{prefix}.queries", self.queries), (f"{prefix}.pixel_pos", self.pixel_pos)]
        for i, block in enumerate(self.blocks):
            out.extend(block.params(f"{prefix}.block{i}"))
        return out


def upsample_bilinear(grid: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear resize by an integer factor, half-pixel-center convention."""
    h, w = grid.shape
    oh, ow = h * factor, w * factor
    ys = (np.arange(oh) + 0.5) / factor - 0.5
    xs = (np.arange(ow) + 0.5) / factor - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.clip(y0 + 1, 0, h - 1)
    x1 = np.clip(x0 + 1, 0, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :]
    top = grid[np.ix_(y0, x0)] * (1 - wx) + grid[np.ix_(y0, x1)] * wx
    bot = grid[np.ix_(y1, x0)] * (1 - wx) + grid[np.ix_(y1, x1)] * wx
    return top * (1 - wy[:, 0])[:, None] + bot * wy[:, 0][:, None]


def binarize(p: np.ndarray, threshold: float = MASK_THRESHOLD) -> np.ndarray:
    """Strictly-greater threshold: ties at 0.5 stay background."""
    return (p > threshold).astype(np.uint8)


def fuse_and_binarize(p_seg_grid: np.ndarray, p_ano_grid: np.ndarray,
                      alpha: float = FUSE_ALPHA) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fuse grid maps, upsample x4, threshold.  Returns (grid, full, mask)."""
    if p_seg_grid.shape != p_ano_grid.shape:
        raise T.ShapeError(f"fuse: {p_seg_grid.shape} vs {p_ano_grid.shape}")
    fused = alpha * p_seg_grid + (1.0 - alpha) * p_ano_grid
    full = upsample_bilinear(fused, 4)
    return fused, full, binarize(full)
