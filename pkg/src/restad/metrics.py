"""Threshold-dependent F1 and threshold-independent AUC / VUS metrics.

AUC-ROC follows the trapezoidal sweep over score tie groups, which equals
the Mann-Whitney pairwise statistic with ties counted one half. AUC-PR is
the trapezoid over the points where recall strictly increases, anchored at
(recall 0, precision 1); when several thresholds share a recall the first
(highest-precision-first) one is kept.

VUS smooths the binary labels per buffer width l: a point at distance j
from the nearest anomalous point gets label max(0, 1 - j / (l + 1)), so
true segments stay at 1 and the l buffer points on each side decay
linearly toward 0. Each slice is a continuous-label AUC sharing the
weighted core below; the volume is the trapezoid over l divided by L.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import NamedTuple

import numpy as np

from .errors import ContractError, UndefinedMetricError

REPORT_SCHEMA_VERSION = 1

# renamed in numpy 2.0
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


@dataclass(frozen=True)
class LabeledScores:
    scores: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        scores = np.ravel(np.asarray(self.scores, dtype=np.float64))
        labels = np.ravel(np.asarray(self.labels))
        if scores.shape[0] != labels.shape[0]:
            raise ContractError(
                f"LabeledScores: {scores.shape[0]} scores vs {labels.shape[0]} labels"
            )
        if scores.shape[0] == 0:
            raise ContractError("LabeledScores: empty input")
        if not np.all(np.isin(labels, (0, 1))):
            raise ContractError("LabeledScores: labels must be 0 or 1")
        object.__setattr__(self, "scores", scores)
        object.__setattr__(self, "labels", labels.astype(np.int64))

    def __len__(self) -> int:
        return self.scores.shape[0]


class Threshold(NamedTuple):
    delta: float
    flags: np.ndarray


def quantile_threshold(scores: np.ndarray, ratio: float) -> Threshold:
    """Flag the top floor(ratio * n) points; delta is the largest unflagged score.

    Ties are broken by a stable sort on (score descending, index ascending),
    so exactly k points are flagged for every input.
    """
    scores = np.ravel(np.asarray(scores, dtype=np.float64))
    n = scores.shape[0]
    if not 0.0 < ratio < 1.0:
        raise ContractError(f"anomaly ratio must lie in (0, 1), got {ratio}")
    if n == 0:
        raise ContractError("quantile_threshold: empty scores")
    k = int(np.floor(ratio * n))
    # argsort on negated scores is stable, so equal scores keep index order
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(n, dtype=bool)
    flags[order[:k]] = True
    # k < n always since ratio < 1
    delta = float(scores[order[k]])
    return Threshold(delta=delta, flags=flags)


def f1_at_threshold(ls: LabeledScores, threshold) -> tuple[float, float, float]:
    """Point-wise precision, recall, F1. No point adjustment of any kind.

    Accepts a Threshold (uses its tie-resolved flags) or a bare float
    (predicts scores strictly above it).
    """
    if isinstance(threshold, Threshold):
        pred = threshold.flags
    else:
        pred = ls.scores > float(threshold)
    labels = ls.labels.astype(bool)
    tp = int(np.sum(pred & labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _tie_group_sums(scores: np.ndarray, pos_weight: np.ndarray):
    """Cumulative positive/negative weight at the end of each score tie group.

    Thresholds sweep from high to low; within a tie group the curve moves
    diagonally, which the trapezoid integrates as half credit.
    """
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    w = pos_weight[order]
    # last index of every group of equal scores
    ends = np.nonzero(np.append(s[1:] != s[:-1], True))[0]
    cum_tp = np.cumsum(w)[ends]
    cum_fp = np.cumsum(1.0 - w)[ends]
    return cum_tp, cum_fp


def _roc_auc_weighted(scores: np.ndarray, pos_weight: np.ndarray) -> float:
    total_pos = float(np.sum(pos_weight))
    total_neg = float(np.sum(1.0 - pos_weight))
    if total_pos <= 0.0 or total_neg <= 0.0:
        raise UndefinedMetricError(
            "AUC-ROC undefined: labels are single-class"
        )
    cum_tp, cum_fp = _tie_group_sums(scores, pos_weight)
    tpr = np.concatenate(([0.0], cum_tp / total_pos))
    fpr = np.concatenate(([0.0], cum_fp / total_neg))
    return float(_trapezoid(tpr, fpr))


def _pr_auc_weighted(scores: np.ndarray, pos_weight: np.ndarray) -> float:
    total_pos = float(np.sum(pos_weight))
    total_neg = float(np.sum(1.0 - pos_weight))
    if total_pos <= 0.0 or total_neg <= 0.0:
        raise UndefinedMetricError(
            "AUC-PR undefined: labels are single-class"
        )
    cum_tp, cum_fp = _tie_group_sums(scores, pos_weight)
    recalls = [0.0]
    precisions = [1.0]
    for tp, fp in zip(cum_tp, cum_fp):
        rec = tp / total_pos
        if rec > recalls[-1]:
            recalls.append(rec)
            precisions.append(tp / (tp + fp))
    if len(recalls) == 1:
        # no threshold ever gains recall: curve is the lone anchor point
        return 0.0
    return float(_trapezoid(precisions, recalls))


def auc_roc(ls: LabeledScores) -> float:
    """Trapezoidal ROC area; equals the pairwise ordering statistic with ties half."""
    return _roc_auc_weighted(ls.scores, ls.labels.astype(np.float64))


def auc_pr(ls: LabeledScores) -> float:
    """Precision-recall area, anchored at (0, 1)."""
    return _pr_auc_weighted(ls.scores, ls.labels.astype(np.float64))


def smooth_labels(labels: np.ndarray, buffer: int) -> np.ndarray:
    """Continuous labels for one VUS slice.

    Distance to the nearest anomalous point turns into a linear ramp:
    1 inside segments, 1 - j/(buffer+1) at distance j <= buffer, 0 beyond.
    buffer=0 reproduces the binary labels exactly.
    """
    labels = np.ravel(np.asarray(labels))
    if buffer < 0:
        raise ContractError(f"buffer must be >= 0, got {buffer}")
    n = labels.shape[0]
    inf = float(n + 1)
    dist = np.full(n, inf)
    dist[labels == 1] = 0.0
    for i in range(1, n):
        dist[i] = min(dist[i], dist[i - 1] + 1.0)
    for i in range(n - 2, -1, -1):
        dist[i] = min(dist[i], dist[i + 1] + 1.0)
    return np.maximum(0.0, 1.0 - dist / (buffer + 1.0))


def vus(ls: LabeledScores, curve: str = "roc", max_buffer: int = 4) -> float:
    """Volume under the ROC or PR surface over buffer widths 0..max_buffer.

    Slice l=0 is exactly the binary AUC; the aggregate is the trapezoid
    over the l axis divided by max_buffer (the mean slice value).
    """
    if curve not in ("roc", "pr"):
        raise ContractError(f"curve must be 'roc' or 'pr', got {curve!r}")
    if max_buffer < 0:
        raise ContractError(f"max_buffer must be >= 0, got {max_buffer}")
    if not (np.any(ls.labels == 1) and np.any(ls.labels == 0)):
        raise UndefinedMetricError("VUS undefined: labels are single-class")
    slice_auc = _roc_auc_weighted if curve == "roc" else _pr_auc_weighted
    values = [
        slice_auc(ls.scores, smooth_labels(ls.labels, buf))
        for buf in range(max_buffer + 1)
    ]
    if max_buffer == 0:
        return values[0]
    return float(_trapezoid(values, dx=1.0) / max_buffer)


@dataclass(frozen=True)
class EvalReport:
    f1: float
    precision: float
    recall: float
    delta: float
    anomaly_ratio: float
    auc_roc: float
    auc_pr: float
    vus_roc: float
    vus_pr: float
    n_points: int
    n_anomalies: int
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def to_table(self) -> str:
        """Aligned text table, columns in the reporting order of the metrics."""
        headers = ("F1-Score", "AUC-ROC", "AUC-PR", "VUS-ROC", "VUS-PR")
        values = (self.f1, self.auc_roc, self.auc_pr, self.vus_roc, self.vus_pr)
        cells = [f"{v:.4f}" for v in values]
        widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
        head = "  ".join(h.rjust(w) for h, w in zip(headers, widths))
        row = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return head + "\n" + row + "\n"


def evaluate(ls: LabeledScores, ratio: float, max_buffer: int = 4) -> EvalReport:
    """Assemble the full metric report for one scored evaluation split."""
    thr = quantile_threshold(ls.scores, ratio)
    precision, recall, f1 = f1_at_threshold(ls, thr)
    return EvalReport(
        f1=f1,
        precision=precision,
        recall=recall,
        delta=thr.delta,
        anomaly_ratio=float(ratio),
        auc_roc=auc_roc(ls),
        auc_pr=auc_pr(ls),
        vus_roc=vus(ls, "roc", max_buffer),
        vus_pr=vus(ls, "pr", max_buffer),
        n_points=len(ls),
        n_anomalies=int(np.sum(ls.labels)),
    )
