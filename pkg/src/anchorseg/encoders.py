"""Frozen deterministic image encoders and the trainable embedding projections.

The two encoders replace heavyweight pretrained backbones with seeded
statistical patchifiers: the semantic stream summarizes coarse 8x8 patches,
the pixel stream keeps raw 4x4 blocks plus local contrast.  Both lift their
per-patch descriptors through a fixed random affine map so downstream
attention sees dense feature vectors.  Identical (image, seed) always yields
bit-identical features; the encoders carry no trainable parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

IMAGE_SIZE = 64
D_LLM = 64
SEMANTIC_GRID = 8
SEMANTIC_DIM = 48
PIXEL_GRID = 16
PIXEL_DIM = 32


class ImageError(ValueError):
    """Input image violates the fixed resolution / value-range contract."""


def validate_image(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ImageError(f"expected {IMAGE_SIZE}x{IMAGE_SIZE} grayscale image, got {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ImageError("pixel values must lie in [0, 1]")
    return arr


@dataclass
class FeatureMap:
    tokens: int
    dim: int
    grid: tuple[int, int]
    data: T.Tensor

    def __post_init__(self):
        rows, cols = self.grid
        if self.tokens != rows * cols:
            raise ValueError(f"tokens {self.tokens} != grid {self.grid}")
        if self.data.shape != (self.tokens, self.dim):
            raise ValueError(f"data shape {self.data.shape} != ({self.tokens}, {self.dim})")


def _patches(img: np.ndarray, grid: int) -> np.ndarray:
    """(grid*grid, p, p) view of non-overlapping patches in row-major order."""
    p = IMAGE_SIZE // grid
    return img.reshape(grid, p, grid, p).transpose(0, 2, 1, 3).reshape(grid * grid, p, p)


def _grad_energy(patch_stack: np.ndarray) -> np.ndarray:
    """Mean squared forward difference inside each patch, both axes."""
    dy = np.diff(patch_stack, axis=1)
    dx = np.diff(patch_stack, axis=2)
    n = dy[0].size + dx[0].size
    return (np.square(dy).sum(axis=(1, 2)) + np.square(dx).sum(axis=(1, 2))) / n


class SemanticEncoder:
    """8x8 patch statistics (mean, variance, gradient energy) -> 48-d."""

    grid = SEMANTIC_GRID
    dim = SEMANTIC_DIM

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 101]))
        self.lift = rng.normal(0.0, 1.0, size=(3, self.dim))
        self.lift_bias = rng.normal(0.0, 0.05, size=self.dim)

    def stats(self, img: np.ndarray) -> np.ndarray:
        patches = _patches(img, self.grid)
        mean = patches.mean(axis=(1, 2))
        var = patches.var(axis=(1, 2))
        energy = _grad_energy(patches)
        return np.stack([mean, var, energy], axis=1)

    def encode(self, img: np.ndarray) -> FeatureMap:
        img = validate_image(img)
        feats = self.stats(img) @ self.lift + self.lift_bias
        return FeatureMap(self.grid * self.grid, self.dim, (self.grid, self.grid), T.tensor(feats))


class PixelEncoder:
    """Raw 4x4 blocks plus local-contrast channels -> 32-d at a 16x16 grid.

    Contrast channels: range, std, gradient energy, and folded deviations of
    the block mean / min / max from mid-gray.  The folded channels matter: a
    linear readout over raw values alone cannot express "darker OR brighter
    than the normal band".
    """

    grid = PIXEL_GRID
    dim = PIXEL_DIM

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 202]))
        self.lift = rng.normal(0.0, 0.5, size=(22, self.dim))
        self.lift_bias = rng.normal(0.0, 0.05, size=self.dim)

    def stats(self, img: np.ndarray) -> np.ndarray:
        patches = _patches(img, self.grid)
        raw = patches.reshape(patches.shape[0], -1)  # 16 raw values
        mx = patches.max(axis=(1, 2))
        mn = patches.min(axis=(1, 2))
        std = patches.std(axis=(1, 2))
        energy = _grad_energy(patches)
        mean = patches.mean(axis=(1, 2))
        contrast = np.stack([mx - mn, std, energy,
                             np.abs(mean - 0.5), np.abs(mn - 0.5), np.abs(mx - 0.5)],
                            axis=1)
        return np.concatenate([raw, contrast], axis=1)

    def encode(self, img: np.ndarray) -> FeatureMap:
        img = validate_image(img)
        feats = self.stats(img) @ self.lift + self.lift_bias
        return FeatureMap(self.grid * self.grid, self.dim, (self.grid, self.grid), T.tensor(feats))


class LinearProjection:
    """Trainable affine map into the shared embedding dimension."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, std: float = 0.05):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = T.param_normal(rng, (in_dim, out_dim), std)
        self.bias = T.param_zeros(out_dim)

    def __call__(self, fmap: FeatureMap) -> FeatureMap:
        if fmap.dim != self.in_dim:
            raise T.ShapeError(f"projection expects dim {self.in_dim}, got {fmap.dim}")
        out = T.add_bias(T.matmul(fmap.data, self.weight), self.bias)
        return FeatureMap(fmap.tokens, self.out_dim, fmap.grid, out)

    def params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def make_projections(rng: np.random.Generator) -> tuple[LinearProjection, LinearProjection]:
    return (LinearProjection(SEMANTIC_DIM, D_LLM, rng),
            LinearProjection(PIXEL_DIM, D_LLM, rng))
