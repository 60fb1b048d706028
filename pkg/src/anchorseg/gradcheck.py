"""Central finite-difference gradient checking against the taped backward."""

from __future__ import annotations

import numpy as np

from . import tensor as T


def finite_diff_grad(loss_fn, leaf: T.Tensor, step: float = 1e-3) -> np.ndarray:
    """Full finite-difference gradient of loss_fn() w.r.t. every entry of leaf.

    loss_fn must read leaf.data afresh on each call and return a float.
    """
    base = leaf.data
    g = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        up = loss_fn()
        flat[i] = keep - step
        dn = loss_fn()
        flat[i] = keep
        gflat[i] = (up - dn) / (2.0 * step)
    return g


def finite_diff_grad_sampled(loss_fn, leaf: T.Tensor, indices, step: float = 1e-3) -> np.ndarray:
    """Finite-difference gradient at selected flat indices only."""
    flat = leaf.data.reshape(-1)
    out = np.zeros(len(indices))
    for j, i in enumerate(indices):
        keep = flat[i]
        flat[i] = keep + step
        up = loss_fn()
        flat[i] = keep - step
        dn = loss_fn()
        flat[i] = keep
        out[j] = (up - dn) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients from amplifying finite-difference
    round-off into spurious failures.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def check_gradients(build_loss, params: dict, step: float = 1e-3,
                    sample: int | None = None, seed: int = 0) -> dict:
    """Compare analytic grads of build_loss() against central differences.

    build_loss: callable that resets the graph, runs the forward pass from
        the current parameter values and returns the scalar loss Tensor.
    params: name -> requires-grad leaf Tensor.
    sample: if given, check only this many seeded entries per tensor
        (the full model is too wide for exhaustive probing).

    Returns name -> max relative error.
    """
    T.reset_graph()
    T.zero_grads(params.values())
    loss = build_loss()
    T.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def loss_value():
        T.reset_graph()
        with_no = build_loss()
        return with_no.item()

    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        flat_n = p.data.size
        if sample is None or sample >= flat_n:
            idx = np.arange(flat_n)
        else:
            idx = rng.choice(flat_n, size=sample, replace=False)
        fd = finite_diff_grad_sampled(loss_value, p, idx, step=step)
        an = analytic[name].reshape(-1)[idx]
        errors[name] = relative_error(an, fd)
    T.reset_graph()
    return errors
