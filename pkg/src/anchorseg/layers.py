"""Shared neural building blocks: affine layers, layer norm, multi-head attention."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T


class AdapterRankError(ValueError):
    """Low-rank adapter rank must be strictly below the smaller weight extent."""


class Linear:
    """y = x @ W + b with an optional additive low-rank adapter W + s*(B @ A).

    A starts at zero so a fresh adapter leaves the layer's output unchanged.
    In adapter mode the base weight and bias are frozen and only A, B train.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 std: float | None = None, bias: bool = True):
        self.in_dim = in_dim
        self.out_dim = out_dim
        if std is None:
            std = math.sqrt(2.0 / (in_dim + out_dim))
        self.weight = T.param_normal(rng, (in_dim, out_dim), std)
        self.bias = T.param_zeros(out_dim) if bias else None
        self.lora_a = None
        self.lora_b = None
        self.lora_scale = 0.0

    def add_adapter(self, rank: int, rng: np.random.Generator) -> None:
        if rank >= min(self.in_dim, self.out_dim):
            raise AdapterRankError(f"rank {rank} >= min dim {min(self.in_dim, self.out_dim)}")
        self.lora_b = T.param_normal(rng, (self.in_dim, rank), 0.02)
        self.lora_a = T.param_zeros((rank, self.out_dim))
        self.lora_scale = 1.0 / rank
        self.weight.requires_grad = False
        if self.bias is not None:
            self.bias.requires_grad = False

    def effective_weight(self) -> T.Tensor:
        if self.lora_a is None:
            return self.weight
        return T.add(self.weight, T.mul_scalar(T.matmul(self.lora_b, self.lora_a), self.lora_scale))

    def __call__(self, x: T.Tensor) -> T.Tensor:
        out = T.matmul(x, self.effective_weight())
        if self.bias is not None:
            out = T.add_bias(out, self.bias)
        return out

    def params(self, prefix: str):
        out = [(f"{prefix}.weight", self.weight)]
        if self.bias is not None:
            out.append((f"{prefix}.bias", self.bias))
        if self.lora_a is not None:
            out.append((f"{prefix}.lora_a", self.lora_a))
            out.append((f"{prefix}.lora_b", self.lora_b))
        return out


class LayerNorm:
    def __init__(self, dim: int):
        self.gain = T.param_ones(dim)
        self.bias = T.param_zeros(dim)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return T.layer_normalize(x, self.gain, self.bias)

    def params(self, prefix: str):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


class MultiHeadAttention:
    """Scaled dot-product attention with separate query / key / value sources."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"dim {dim} not divisible by {n_heads} heads")
        self.dim = dim
        self.n_heads = n_heads
        self.head_dim = dim // n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def __call__(self, q_in: T.Tensor, k_in: T.Tensor, v_in: T.Tensor,
                 mask: np.ndarray | None = None) -> T.Tensor:
        q = self.q(q_in)
        k = self.k(k_in)
        v = self.v(v_in)
        scale = 1.0 / math.sqrt(self.head_dim)
        heads = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            qh = T.slice_cols(q, lo, hi)
            kh = T.slice_cols(k, lo, hi)
            vh = T.slice_cols(v, lo, hi)
            scores = T.mul_scalar(T.matmul(qh, T.transpose(kh)), scale)
            if mask is not None:
                scores = T.add(scores, T.tensor(mask))
            heads.append(T.matmul(T.softmax_last_axis(scores), vh))
        return self.out(T.concat_cols(heads))

    def attention_weights(self, q_in: T.Tensor, k_in: T.Tensor,
                          mask: np.ndarray | None = None) -> np.ndarray:
        """Per-head softmax weights, shape (heads, Tq, Tk); inspection only."""
        with T.no_grad():
            q = self.q(q_in).data
            k = self.k(k_in).data
        scale = 1.0 / math.sqrt(self.head_dim)
        out = []
        for h in range(self.n_heads):
            lo, hi = h * self.head_dim, (h + 1) * self.head_dim
            scores = q[:, lo:hi] @ k[:, lo:hi].T * scale
            if mask is not None:
                scores = scores + mask
            shifted = scores - scores.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            out.append(e / e.sum(axis=-1, keepdims=True))
        return np.stack(out)

    def params(self, prefix: str):
        out = []
        for name, lin in (("q", self.q), ("k", self.k), ("v", self.v), ("out", self.out)):
            out.extend(lin.params(f"{prefix}.{name}"))
        return out


class FeedForward:
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.lin1 = Linear(dim, hidden, rng)
        self.lin2 = Linear(hidden, dim, rng)

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.lin2(T.silu(self.lin1(x)))

    def params(self, prefix: str):
        return self.lin1.params(f"{prefix}.lin1") + self.lin2.params(f"{prefix}.lin2")
