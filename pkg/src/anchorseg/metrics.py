"""Pixel-level evaluation: AP, F1-Max, per-image IoU, and rejection rate.

Each metric ships with a brute-force oracle so the fast implementation never
has to be trusted on faith.  AP and F1 pool pixels across all images of a
category; the IoU metrics are per-image means over the anomalous / normal
subsets.
"""

from __future__ import annotations

import re
import warnings
from dataclasses import dataclass, field

import numpy as np

F1_MAX_CANDIDATE_CAP = 4096


class MetricInputError(ValueError):
    pass


@dataclass
class EvalRecord:
    image_id: str
    category: str
    is_anomalous: bool
    score_map: np.ndarray  # float scores, higher = more anomalous
    mask: np.ndarray       # binary prediction
    gt: np.ndarray         # binary ground truth (all-zero for normal samples)

    def __post_init__(self):
        self.score_map = np.asarray(self.score_map, dtype=np.float64)
        self.mask = np.asarray(self.mask) > 0
        self.gt = np.asarray(self.gt) > 0
        if not (self.score_map.shape == self.mask.shape == self.gt.shape):
            raise MetricInputError(f"map shapes differ for {self.image_id}")
        if not self.is_anomalous and self.gt.any():
            raise MetricInputError(f"normal sample {self.image_id} has nonempty ground truth")


@dataclass
class MetricsReport:
    per_category: dict[str, dict[str, float]]
    mean: dict[str, float]
    counts: dict[str, dict[str, int]]


# ---------------------------------------------------------------------------
# Threshold-free metrics
# ---------------------------------------------------------------------------

def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP = sum_n (R_n - R_{n-1}) P_n over descending unique thresholds.

    Tied scores enter together, so the curve is threshold-consistent.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricInputError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(~sorted_labels)
    # keep only the last entry of each tie group
    last_of_group = np.nonzero(np.diff(sorted_scores, append=-np.inf))[0]
    tp = tp[last_of_group]
    fp = fp[last_of_group]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def average_precision_oracle(scores, labels) -> float:
    """O(n^2) enumeration over every distinct threshold."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricInputError("average_precision needs at least one positive")
    ap = 0.0
    prev_recall = 0.0
    for thr in sorted(set(scores), reverse=True):
        pred = scores >= thr
        tp = int((pred & labels).sum())
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def f1_max(scores: np.ndarray, labels: np.ndarray) -> float:
    """Best F1 over candidate thresholds (prediction = score >= threshold).

    All unique scores are tried when there are at most 4096 of them;
    otherwise 4096 quantile candidates.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricInputError("f1_max needs at least one positive")
    uniq = np.unique(scores)
    if uniq.size > F1_MAX_CANDIDATE_CAP:
        qs = np.linspace(0.0, 1.0, F1_MAX_CANDIDATE_CAP)
        candidates = np.unique(np.quantile(uniq, qs))
    else:
        candidates = uniq
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    tp_cum = np.cumsum(sorted_labels)
    # number of predictions at threshold t = count of scores >= t
    counts = np.searchsorted(-sorted_scores, -candidates, side="right")
    best = 0.0
    for thr, k in zip(candidates, counts):
        if k == 0:
            continue
        tp = int(tp_cum[k - 1])
        f1 = 2.0 * tp / (k + n_pos)  # == 2PR/(P+R) without the 0/0 hazard
        best = max(best, f1)
    return best


def f1_max_oracle(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(bool)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricInputError("f1_max needs at least one positive")
    best = 0.0
    for thr in np.unique(scores):
        pred = scores >= thr
        tp = int((pred & labels).sum())
        denom = int(pred.sum()) + n_pos
        if denom:
            best = max(best, 2.0 * tp / denom)
    return best


# ---------------------------------------------------------------------------
# Binary-mask metrics
# ---------------------------------------------------------------------------

def iou_single(mask: np.ndarray, gt: np.ndarray) -> float:
    """|M n G| / |M u G|; the empty-union case is the caller's problem."""
    mask = np.asarray(mask) > 0
    gt = np.asarray(gt) > 0
    union = int((mask | gt).sum())
    if union == 0:
        raise MetricInputError("IoU undefined for empty union")
    return int((mask & gt).sum()) / union


def iou_ano(records: list[EvalRecord]) -> float:
    """Mean per-image IoU over the anomalous subset."""
    subset = [r for r in records if r.is_anomalous]
    if not subset:
        raise MetricInputError("iou_ano over an empty anomalous subset")
    vals = []
    for r in subset:
        if not (r.mask.any() or r.gt.any()):
            # impossible under the dataset construction; keep the guard anyway
            warnings.warn(f"empty union on anomalous sample {r.image_id}; scored 1.0")
            vals.append(1.0)
        else:
            vals.append(iou_single(r.mask, r.gt))
    return float(np.mean(vals))


def iou_nor(records: list[EvalRecord]) -> float:
    """Fraction of normal images whose predicted mask is completely empty."""
    subset = [r for r in records if not r.is_anomalous]
    if not subset:
        raise MetricInputError("iou_nor over an empty normal subset")
    return float(np.mean([0.0 if r.mask.any() else 1.0 for r in subset]))


def iou_oracle(mask, gt) -> float:
    """Pixel-enumeration IoU."""
    mask = np.asarray(mask).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    inter = union = 0
    for m, g in zip(mask > 0, gt > 0):
        inter += int(m and g)
        union += int(m or g)
    if union == 0:
        raise MetricInputError("IoU undefined for empty union")
    return inter / union


# ---------------------------------------------------------------------------
# Dataset-level aggregation
# ---------------------------------------------------------------------------

METRIC_KEYS = ("ap", "f1_max", "iou_ano", "iou_nor")


def evaluate_dataset(records: list[EvalRecord]) -> MetricsReport:
    """Per-category metrics plus their unweighted mean, categories sorted."""
    if not records:
        raise MetricInputError("no records to evaluate")
    resolution = records[0].score_map.shape
    for r in records:
        if r.score_map.shape != resolution:
            raise MetricInputError(f"mixed resolutions: {resolution} vs {r.score_map.shape}")
    per_category: dict[str, dict[str, float]] = {}
    counts: dict[str, dict[str, int]] = {}
    for cat in sorted({r.category for r in records}):
        rows = [r for r in records if r.category == cat]
        scores = np.concatenate([r.score_map.reshape(-1) for r in rows])
        labels = np.concatenate([r.gt.reshape(-1) for r in rows])
        n_ano = sum(r.is_anomalous for r in rows)
        n_nor = len(rows) - n_ano
        if labels.any():
            entry = {"ap": average_precision(scores, labels),
                     "f1_max": f1_max(scores, labels),
                     "iou_ano": iou_ano(rows)}
        else:
            # no positive pixels anywhere: threshold metrics undefined
            entry = {"ap": float("nan"), "f1_max": float("nan"), "iou_ano": float("nan")}
        entry["iou_nor"] = iou_nor(rows) if n_nor else float("nan")
        per_category[cat] = entry
        counts[cat] = {"n_ano": n_ano, "n_nor": n_nor}
    mean = {}
    for key in METRIC_KEYS:
        vals = [v[key] for v in per_category.values() if not np.isnan(v[key])]
        mean[key] = float(np.mean(vals)) if vals else float("nan")
    return MetricsReport(per_category=per_category, mean=mean, counts=counts)


# ---------------------------------------------------------------------------
# Report formatting
# ---------------------------------------------------------------------------

_TUPLE_RE = re.compile(r"^\(\s*([\d.]+)\s*,\s*([\d.]+)\s*,\s*([\d.]+)\s*\)$")


def format_tuple(ap: float, f1: float, iou: float) -> str:
    """Percent-scale one-decimal tuple, e.g. (51.0, 52.7, 44.8)."""
    return f"({ap * 100:.1f}, {f1 * 100:.1f}, {iou * 100:.1f})"


def parse_tuple(text: str) -> tuple[float, float, float]:
    m = _TUPLE_RE.match(text.strip())
    if not m:
        raise ValueError(f"not a metric tuple: {text!r}")
    return tuple(float(g) / 100.0 for g in m.groups())  # type: ignore[return-value]


def format_report(report: MetricsReport, title: str = "evaluation") -> str:
    lines = [title]
    header = f"{'category':<14}{'(AP, F1-Max, IoU_ano)':<26}{'IoU_nor':>9}{'N_ano':>7}{'N_nor':>7}"
    lines.append(header)
    lines.append("-" * len(header))

    def row(name, vals, n_ano, n_nor):
        tup = format_tuple(vals["ap"], vals["f1_max"], vals["iou_ano"])
        nor = "-" if np.isnan(vals["iou_nor"]) else f"{vals['iou_nor'] * 100:.1f}"
        return f"{name:<14}{tup:<26}{nor:>9}{n_ano:>7}{n_nor:>7}"

    for cat, vals in report.per_category.items():
        lines.append(row(cat, vals, report.counts[cat]["n_ano"], report.counts[cat]["n_nor"]))
    total_ano = sum(c["n_ano"] for c in report.counts.values())
    total_nor = sum(c["n_nor"] for c in report.counts.values())
    lines.append(row("mean", report.mean, total_ano, total_nor))
    return "\n".join(lines) + "\n"


def report_to_kv(report: MetricsReport) -> str:
    """Machine-readable key=value dump, full precision."""
    lines = []
    for cat, vals in report.per_category.items():
        for key in METRIC_KEYS:
            lines.append(f"{cat}.{key} = {vals[key]!r}")
        lines.append(f"{cat}.n_ano = {report.counts[cat]['n_ano']}")
        lines.append(f"{cat}.n_nor = {report.counts[cat]['n_nor']}")
    for key in METRIC_KEYS:
        lines.append(f"mean.{key} = {report.mean[key]!r}")
    return "\n".join(lines) + "\n"
