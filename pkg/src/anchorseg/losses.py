"""Training objectives: autoregressive text loss and per-anchor BCE + Dice.

Segmentation is supervised at the decoder's 16x16 grid; ground truth comes
down from 64x64 by the area rule (a cell is anomalous when at least half its
pixels are).  The normal-anchor target is always the complement of the
anomaly mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .decoder import DecodedMaps

HEAD_NAMES = ("seg", "nor", "ano")


class InconsistentTripleError(ValueError):
    """Supervision maps disagree with M_NOR = 1 - M_ANO."""


class NonFiniteLossError(FloatingPointError):
    """A loss term went NaN/inf; training must stop, not limp on."""


@dataclass
class LossConfig:
    lambda_bce: float = 0.5
    lambda_dice: float = 2.0
    alpha: float = 0.5
    dice_eps: float = 1.0
    bce_clamp: float = 1e-7

    def __post_init__(self):
        if self.lambda_bce < 0 or self.lambda_dice < 0:
            raise ValueError("loss weights must be nonnegative")
        if not (0.0 < self.bce_clamp < 0.5):
            raise ValueError("bce_clamp must lie in (0, 0.5)")


@dataclass
class SupervisionTriple:
    """Ground-truth maps for the three anchors on the 16x16 grid (flat)."""

    m_seg: np.ndarray
    m_ano: np.ndarray
    m_nor: np.ndarray

    def __post_init__(self):
        self.m_seg = np.asarray(self.m_seg, dtype=np.float64).reshape(-1)
        self.m_ano = np.asarray(self.m_ano, dtype=np.float64).reshape(-1)
        self.m_nor = np.asarray(self.m_nor, dtype=np.float64).reshape(-1)
        if not np.array_equal(self.m_nor, 1.0 - self.m_ano):
            raise InconsistentTripleError("M_NOR must equal 1 - M_ANO exactly")

    @classmethod
    def from_mask(cls, gt_full: np.ndarray, grid: int = 16) -> "SupervisionTriple":
        m = downsample_mask(gt_full, grid).reshape(-1)
        return cls(m_seg=m, m_ano=m, m_nor=1.0 - m)

    def for_head(self, head: str) -> np.ndarray:
        return {"seg": self.m_seg, "ano": self.m_ano, "nor": self.m_nor}[head]


def downsample_mask(gt_full: np.ndarray, grid: int = 16) -> np.ndarray:
    """Area rule: a grid cell is 1 iff >= 50% of its pixels are anomalous."""
    gt = np.asarray(gt_full, dtype=np.float64)
    h, w = gt.shape
    if h % grid or w % grid:
        raise T.ShapeError(f"mask {gt.shape} not divisible by grid {grid}")
    ph, pw = h // grid, w // grid
    coverage = gt.reshape(grid, ph, grid, pw).mean(axis=(1, 3))
    return (coverage >= 0.5).astype(np.float64)


def text_loss(logits: T.Tensor, target_ids, start: int, stop: int) -> T.Tensor:
    """Mean NLL over the supervised logit rows [start, stop)."""
    if stop <= start:
        raise ValueError(f"empty supervision range [{start}, {stop})")
    targets = list(target_ids)
    if len(targets) != stop - start:
        raise T.ShapeError(f"{len(targets)} targets for range [{start}, {stop})")
    return T.cross_entropy_mean(T.slice_rows(logits, start, stop), targets)


def bce_loss(p: T.Tensor, m_gt: np.ndarray, clamp: float = 1e-7) -> T.Tensor:
    m = np.asarray(m_gt, dtype=np.float64).reshape(-1)
    if p.data.shape != m.shape:
        raise T.ShapeError(f"bce: prediction {p.data.shape} vs target {m.shape}")
    pc = T.clamp(p, clamp, 1.0 - clamp)
    pos = T.mul(T.log(pc), T.tensor(m))
    neg = T.mul(T.log(T.add_scalar(T.mul_scalar(pc, -1.0), 1.0)), T.tensor(1.0 - m))
    return T.mul_scalar(T.mean_all(T.add(pos, neg)), -1.0)


def dice_loss(p: T.Tensor, m_gt: np.ndarray, eps: float = 1.0) -> T.Tensor:
    m = np.asarray(m_gt, dtype=np.float64).reshape(-1)
    if p.data.shape != m.shape:
        raise T.ShapeError(f"dice: prediction {p.data.shape} vs target {m.shape}")
    inter = T.sum_all(T.mul(p, T.tensor(m)))
    num = T.add_scalar(T.mul_scalar(inter, 2.0), eps)
    den = T.add_scalar(T.sum_all(p), float(m.sum()) + eps)
    return T.add_scalar(T.mul_scalar(T.div(num, den), -1.0), 1.0)


def seg_loss_parts(maps: DecodedMaps, gt: SupervisionTriple, cfg: LossConfig,
                   heads: tuple[str, ...] = HEAD_NAMES) -> dict[str, T.Tensor]:
    """Per-head BCE/Dice terms, keyed 'bce_seg', 'dice_nor', ... plus 'total'."""
    preds = {"seg": maps.p_seg, "nor": maps.p_nor, "ano": maps.p_ano}
    parts: dict[str, T.Tensor] = {}
    total = None
    for head in heads:
        p = preds[head]
        if p is None:
            continue  # ablated head
        b = bce_loss(p, gt.for_head(head), cfg.bce_clamp)
        d = dice_loss(p, gt.for_head(head), cfg.dice_eps)
        parts[f"bce_{head}"] = b
        parts[f"dice_{head}"] = d
        term = T.add(T.mul_scalar(b, cfg.lambda_bce), T.mul_scalar(d, cfg.lambda_dice))
        total = term if total is None else T.add(total, term)
    if total is None:
        raise ValueError("no live heads to supervise")
    parts["total"] = total
    return parts


def seg_loss(maps: DecodedMaps, gt: SupervisionTriple, cfg: LossConfig,
             heads: tuple[str, ...] = HEAD_NAMES) -> T.Tensor:
    return seg_loss_parts(maps, gt, cfg, heads)["total"]


def total_loss(text: T.Tensor, seg: T.Tensor | None) -> T.Tensor:
    """Unweighted sum; refuses non-finite inputs outright."""
    if not np.isfinite(text.data).all():
        raise NonFiniteLossError("text loss is not finite")
    if seg is None:
        return text
    if not np.isfinite(seg.data).all():
        raise NonFiniteLossError("segmentation loss is not finite")
    return T.add(text, seg)
