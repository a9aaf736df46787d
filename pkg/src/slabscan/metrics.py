"""ROC/AUC evaluation, DeLong confidence intervals, and localization scores."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import norm


def _scores_labels(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if s.shape != y.shape:
        raise ValueError("scores and labels must have equal length")
    if s.size == 0:
        raise ValueError("empty input")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be binary")
    return s, y


def _midranks(x: np.ndarray) -> np.ndarray:
    """Midranks (1-based); every member of a tie block gets the block's mean rank."""
    order = np.argsort(x, kind="mergesort")
    sorted_x = x[order]
    ranks_sorted = np.arange(1, len(x) + 1, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_x) != 0)
    starts = np.concatenate(([0], boundaries + 1))
    ends = np.concatenate((boundaries, [len(x) - 1]))
    for a, b in zip(starts, ends):
        if b > a:
            ranks_sorted[a:b + 1] = (a + b + 2) / 2.0
    out = np.empty(len(x), dtype=np.float64)
    out[order] = ranks_sorted
    return out


def auc(scores, labels) -> float:
    """Area under the ROC curve, Mann-Whitney form with half credit for ties."""
    s, y = _scores_labels(scores, labels)
    m = int(np.sum(y == 1))
    n = int(np.sum(y == 0))
    if m == 0 or n == 0:
        raise ValueError("AUC requires at least one positive and one negative")
    ranks = _midranks(s)
    return float((np.sum(ranks[y == 1]) - m * (m + 1) / 2.0) / (m * n))


def _placement_values(s: np.ndarray, y: np.ndarray
                      ) -> tuple[float, np.ndarray, np.ndarray]:
    """AUC plus DeLong structural components V10 (per positive), V01 (per negative)."""
    pos = s[y == 1]
    neg = s[y == 0]
    m, n = len(pos), len(neg)
    combined = np.concatenate([pos, neg])
    tz = _midranks(combined)
    tx = _midranks(pos)
    ty = _midranks(neg)
    v10 = (tz[:m] - tx) / n
    v01 = 1.0 - (tz[m:] - ty) / m
    a = (np.sum(tz[:m]) - m * (m + 1) / 2.0) / (m * n)
    return float(a), v10, v01


def delong_ci(scores, labels, alpha: float = 0.05) -> tuple[float, float]:
    """Normal-approximation AUC confidence interval via DeLong's variance.

    Uses the placement-value (structural components) formulation computed
    from midranks in O(n log n). Perfect separation has zero estimated
    variance; in that case the point interval is returned with a warning.
    The interval is clipped to [0, 1].
    """
    s, y = _scores_labels(scores, labels)
    if np.sum(y == 1) < 2 or np.sum(y == 0) < 2:
        raise ValueError("DeLong CI requires at least two samples per class")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    a, v10, v01 = _placement_values(s, y)
    var = np.var(v10, ddof=1) / len(v10) + np.var(v01, ddof=1) / len(v01)
    if var <= 0.0:
        warnings.warn("degenerate DeLong variance (perfect separation); "
                      "returning point interval", stacklevel=2)
        return (a, a)
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * float(np.sqrt(var))
    return (max(0.0, a - half), min(1.0, a + half))


def accuracy_at(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of samples where (score >= threshold) equals the label."""
    s, y = _scores_labels(scores, labels)
    predicted = (s >= threshold).astype(int)
    return float(np.mean(predicted == y))


def roc_points(scores, labels) -> list[tuple[float, float]]:
    """ROC polyline from (0,0) to (1,1), one vertex per distinct score.

    Ties are grouped, so the trapezoidal area under the polyline equals
    the Mann-Whitney AUC.
    """
    s, y = _scores_labels(scores, labels)
    m = int(np.sum(y == 1))
    n = int(np.sum(y == 0))
    if m == 0 or n == 0:
        raise ValueError("ROC requires at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(1 - y_sorted)
    # keep the last index within each block of tied scores
    last_of_block = np.r_[np.diff(s_sorted) != 0, True]
    tpr = tp[last_of_block] / m
    fpr = fp[last_of_block] / n
    pts = [(0.0, 0.0)] + list(zip(fpr.tolist(), tpr.tolist()))
    if pts[-1] != (1.0, 1.0):
        pts.append((1.0, 1.0))
    return pts


def trapezoid_area(points: list[tuple[float, float]]) -> float:
    xs = np.array([p[0] for p in points])
    ys = np.array([p[1] for p in points])
    return float(np.trapezoid(ys, xs))


def attention_localization(attention, mask) -> tuple[float, int]:
    """Localization scores of an attention map against a nonempty binary mask.

    Returns (inside_fraction, hit): the share of attention mass inside the
    mask (0 when the map is all zero) and whether an argmax of the map lies
    inside the mask (any tied argmax inside counts).
    """
    a = np.asarray(attention, dtype=np.float64)
    m = np.asarray(mask)
    if a.shape != m.shape:
        raise ValueError("attention and mask shapes differ")
    m = m > 0
    if not m.any():
        raise ValueError("mask must be nonempty")
    total = a.sum()
    inside = float(a[m].sum() / total) if total > 0 else 0.0
    hit = int(bool(np.any(m & (a == a.max()))))
    return inside, hit


@dataclass
class EvalResult:
    """Study- or slab-level evaluation summary."""

    roc_points: list[tuple[float, float]]
    auc: float
    ci: tuple[float, float]
    accuracy: float
    n_pos: int
    n_neg: int
    threshold: float = 0.5
    alpha: float = 0.05
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc,
            "ci": list(self.ci),
            "accuracy": self.accuracy,
            "threshold": self.threshold,
            "alpha": self.alpha,
            "n_pos": self.n_pos,
            "n_neg": self.n_neg,
            "roc_points": [list(p) for p in self.roc_points],
            **self.extra,
        }


def evaluate(scores, labels, threshold: float = 0.5, alpha: float = 0.05) -> EvalResult:
    s, y = _scores_labels(scores, labels)
    return EvalResult(
        roc_points=roc_points(s, y),
        auc=auc(s, y),
        ci=delong_ci(s, y, alpha),
        accuracy=accuracy_at(s, y, threshold),
        n_pos=int(np.sum(y == 1)),
        n_neg=int(np.sum(y == 0)),
        threshold=threshold,
        alpha=alpha,
    )


def write_report(result: EvalResult, path: str | Path, header: dict | None = None) -> None:
    """Write an evaluation report as human-readable JSON."""
    payload = dict(header or {})
    payload.update(result.to_dict())
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_scores_csv(path: str | Path, rows: list[tuple[str, float, int]]) -> None:
    """CSV export of (study_id, score, label) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["study_id", "score", "label"])
        for study_id, score, label in rows:
            writer.writerow([study_id, f"{score:.6f}", int(label)])


def save_roc_plot(points: list[tuple[float, float]], path: str | Path,
                  label: str | None = None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [p[0] for p in points]
    ys = [p[1] for p in points]
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.plot(xs, ys, lw=1.5, label=label)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    if label:
        ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
