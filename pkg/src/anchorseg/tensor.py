"""Dense float64 tensors with taped reverse-mode differentiation.

A single module-level tape records every op whose inputs require gradients,
in creation order.  ``backward`` walks the tape once, in reverse, and leaves
gradients on the requires-grad leaves.  The tape is consumed by ``backward``
and must be cleared with ``reset_graph`` before the next forward pass.

No general broadcasting: shapes must match exactly except for the bias-add
and the scalar ops.  This is deliberate -- at desk scale an unexpected
broadcast is almost always a wiring bug.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an op's contract."""


class GraphConsumedError(RuntimeError):
    """backward() was called twice without reset_graph()."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None  # set when this tensor is produced by a taped op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, requires_grad={self.requires_grad})"

    # Small operator sugar; the named functions below are the real API.
    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return mul_scalar(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul_scalar(self, -1.0)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class _Node:
    __slots__ = ("inputs",)

    def __init__(self, inputs):
        # inputs: list of (Tensor, vjp) where vjp maps the output gradient to
        # this input's gradient contribution
        self.inputs = inputs


_nodes: list[_Node] = []
_consumed = False
_grad_enabled = True


def reset_graph() -> None:
    """Drop all recorded ops and re-arm backward()."""
    global _consumed
    _nodes.clear()
    _consumed = False


def graph_size() -> int:
    return len(_nodes)


class no_grad:
    """Context manager that disables taping (inference / metric work)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _record(out: Tensor, pairs) -> Tensor:
    """Tape the op that produced `out`. pairs = [(input, vjp), ...]."""
    if not _grad_enabled:
        return out
    live = [(t, fn) for t, fn in pairs if t.requires_grad]
    if not live:
        return out
    out.requires_grad = True
    _nodes.append(_Node(live))
    out.node_id = len(_nodes) - 1
    return out


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dLeaf on every requires-grad leaf reachable from loss.

    Visits tape nodes in reverse creation order exactly once.  Rejects a
    non-scalar loss and a tape that was already consumed.
    """
    global _consumed
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if _consumed:
        raise GraphConsumedError("graph already consumed; call reset_graph() first")
    _consumed = True
    if not loss.requires_grad:
        return
    if loss.node_id is None:
        # requires-grad leaf used directly as the loss
        seed = np.ones_like(loss.data)
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return

    pending: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    for idx in range(loss.node_id, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        for inp, vjp in _nodes[idx].inputs:
            contrib = vjp(g)
            if inp.node_id is not None:
                prev = pending.get(inp.node_id)
                pending[inp.node_id] = contrib if prev is None else prev + contrib
            else:
                inp.grad = contrib.copy() if inp.grad is None else inp.grad + contrib


# ---------------------------------------------------------------------------
# Elementwise and scalar ops
# ---------------------------------------------------------------------------

def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    return _record(out, [(a, lambda g: g), (b, lambda g: g)])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    return _record(out, [(a, lambda g: g), (b, lambda g: -g)])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    return _record(out, [(a, lambda g: g * b.data), (b, lambda g: g * a.data)])


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "div")
    out = Tensor(a.data / b.data)
    return _record(out, [
        (a, lambda g: g / b.data),
        (b, lambda g: -g * a.data / (b.data * b.data)),
    ])


def add_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + c)
    return _record(out, [(a, lambda g: g)])


def mul_scalar(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)
    return _record(out, [(a, lambda g: g * c)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[..., d] + b[d] -- the one permitted broadcast."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} with bias {b.shape}")
    out = Tensor(x.data + b.data)
    axes = tuple(range(x.data.ndim - 1))
    return _record(out, [
        (x, lambda g: g),
        (b, lambda g: g.sum(axis=axes) if axes else g),
    ])


def log(x: Tensor) -> Tensor:
    out = Tensor(np.log(x.data))
    return _record(out, [(x, lambda g: g / x.data)])


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = Tensor(np.clip(x.data, lo, hi))
    inside = (x.data > lo) & (x.data < hi)
    return _record(out, [(x, lambda g: g * inside)])


def sigmoid_map(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)), stable for large |x|."""
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(s)
    return _record(out, [(x, lambda g: g * s * (1.0 - s))])


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x); smooth, so finite-difference checks stay clean."""
    d = x.data
    s = np.empty_like(d)
    pos = d >= 0
    s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    s[~pos] = e / (1.0 + e)
    out = Tensor(d * s)
    return _record(out, [(x, lambda g: g * (s + d * s * (1.0 - s)))])


def softmax_last_axis(x: Tensor) -> Tensor:
    """Rows sum to 1; max-subtracted for stability."""
    if x.data.shape[-1] < 1:
        raise ShapeError("softmax on empty last axis")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(s)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return s * (g - dot)

    return _record(out, [(x, vjp)])


def layer_normalize(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row zero mean / unit variance over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_normalize: x {x.shape}, gain {gain.shape}, bias {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def vjp_x(g):
        gg = g * gain.data
        term = gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        return term * inv

    axes = tuple(range(x.data.ndim - 1))

    def vjp_gain(g):
        r = g * xhat
        return r.sum(axis=axes) if axes else r

    def vjp_bias(g):
        return g.sum(axis=axes) if axes else g

    return _record(out, [(x, vjp_x), (gain, vjp_gain), (bias, vjp_bias)])


# ---------------------------------------------------------------------------
# Matrix / structural ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, [
        (a, lambda g: g @ b.data.T),
        (b, lambda g: a.data.T @ g),
    ])


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    out = Tensor(a.data.T.copy())
    return _record(out, [(a, lambda g: g.T.copy())])


def concat_tokens(parts: list[Tensor]) -> Tensor:
    """Row-stack token matrices with equal feature dims, order preserved."""
    if not parts:
        raise ShapeError("concat_tokens of nothing")
    d = parts[0].shape[-1]
    for p in parts:
        if p.data.ndim != 2 or p.shape[-1] != d:
            raise ShapeError(f"concat_tokens: feature dims differ ({[tuple(q.shape) for q in parts]})")
    out = Tensor(np.concatenate([p.data for p in parts], axis=0))
    pairs = []
    start = 0
    for p in parts:
        n = p.shape[0]
        pairs.append((p, (lambda s, e: lambda g: g[s:e])(start, start + n)))
        start += n
    return _record(out, pairs)


def concat_cols(parts: list[Tensor]) -> Tensor:
    """Column-stack matrices with equal row counts (head merge, logit pairs)."""
    if not parts:
        raise ShapeError("concat_cols of nothing")
    n = parts[0].shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.shape[0] != n:
            raise ShapeError("concat_cols: row counts differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=1))
    pairs = []
    start = 0
    for p in parts:
        w = p.shape[1]
        pairs.append((p, (lambda s, e: lambda g: g[:, s:e])(start, start + w)))
        start += w
    return _record(out, pairs)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("slice_rows needs a matrix")
    out = Tensor(x.data[start:stop].copy())

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return full

    return _record(out, [(x, vjp)])


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError("slice_cols needs a matrix")
    out = Tensor(x.data[:, start:stop].copy())

    def vjp(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return full

    return _record(out, [(x, vjp)])


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embeddings); gradient scatter-adds into the table."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError("take_rows needs a matrix table")
    out = Tensor(table.data[idx].copy())

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return full

    return _record(out, [(table, vjp)])


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy())
    return _record(out, [(x, lambda g: g.reshape(x.data.shape))])


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())
    return _record(out, [(x, lambda g: np.full_like(x.data, float(g)))])


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    out = Tensor(x.data.mean())
    return _record(out, [(x, lambda g: np.full_like(x.data, float(g) / n))])


def cross_entropy_mean(logits: Tensor, targets) -> Tensor:
    """Mean negative log-softmax of `targets` under `logits` rows.

    Fused for numerical stability; the per-row oracle in the tests recomputes
    it from softmax directly.
    """
    idx = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy_mean: logits {logits.shape}, targets {idx.shape}")
    if idx.shape[0] == 0:
        raise ShapeError("cross_entropy_mean over an empty range")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(idx.shape[0])
    nll = lse - z[rows, idx]
    out = Tensor(nll.mean())
    n = idx.shape[0]

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, idx] -= 1.0
        return p * (float(g) / n)

    return _record(out, [(logits, vjp)])


# ---------------------------------------------------------------------------
# Parameter helpers
# ---------------------------------------------------------------------------

def param_normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def param_zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def param_ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
