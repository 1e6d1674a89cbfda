"""Energy threshold calibration, OOD metrics and figure-data exports.

Energy semantics throughout: lower energy means "more inlier".  A sample is
an inlier iff ``energy < xi`` (ties at the threshold count as outliers).
The threshold is the nearest-rank 95th percentile of validation inlier
energies, i.e. the ``ceil(0.95 n)``-th smallest value.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidArgument
from .numerics import pca_top2, project

TPR_LEVEL = 0.95
METRIC_KEYS = ("fpr95", "auroc", "inlier_accuracy", "threshold", "n_id", "n_ood",
               "degenerate_threshold")


@dataclass
class ScoreSet:
    id_scores: np.ndarray
    ood_scores: np.ndarray
    semantics: str = "energy"  # or "negated-energy" (higher = more inlier)

    def energies(self):
        sign = -1.0 if self.semantics == "negated-energy" else 1.0
        return sign * _scores(self.id_scores, "id"), sign * _scores(self.ood_scores, "ood")


def _scores(x, name):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size == 0:
        raise InvalidArgument(f"{name} scores are empty")
    if not np.all(np.isfinite(x)):
        raise InvalidArgument(f"{name} scores contain non-finite values")
    return x


def _as_energies(scores, ood=None):
    if isinstance(scores, ScoreSet):
        return scores.energies()
    return _scores(scores, "id"), _scores(ood, "ood")


def _rank(n):
    return max(1, math.ceil(TPR_LEVEL * n - 1e-9))


def calibrate_threshold(id_energies) -> float:
    e = np.sort(_scores(id_energies, "id"))
    return float(e[_rank(len(e)) - 1])


def threshold_is_degenerate(id_energies, xi) -> bool:
    """True when ties at ``xi`` (or a single value) admit fewer inliers than the rank implies."""
    e = _scores(id_energies, "id")
    admitted = int(np.sum(e < xi))
    return admitted == 0 or admitted < _rank(len(e)) - 1


def classify(energy, xi) -> str:
    return "inlier" if energy < xi else "outlier"


def is_inlier(energies, xi) -> np.ndarray:
    return np.asarray(energies) < xi


def fpr95(scores, ood=None) -> float:
    """Fraction of outliers accepted at the calibrated threshold."""
    e_id, e_ood = _as_energies(scores, ood)
    xi = calibrate_threshold(e_id)
    return float(np.mean(e_ood < xi))


def auroc(scores, ood=None) -> float:
    """P(inlier scores higher than outlier) with ties worth one half.

    Detection score is the negated energy; computed from average ranks.
    """
    e_id, e_ood = _as_energies(scores, ood)
    n, m = len(e_id), len(e_ood)
    ranks = rankdata(np.concatenate([-e_id, -e_ood]), method="average")
    u = ranks[:n].sum() - n * (n + 1) / 2.0
    return float(u / (n * m))


@dataclass
class Metrics:
    fpr95: float
    auroc: float
    inlier_accuracy: float
    threshold: float
    n_id: int
    n_ood: int
    degenerate_threshold: bool

    def to_dict(self):
        return {k: getattr(self, k) for k in METRIC_KEYS}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def compute_metrics(id_energies, ood_energies, inlier_accuracy=float("nan")) -> Metrics:
    e_id = _scores(id_energies, "id")
    e_ood = _scores(ood_energies, "ood")
    xi = calibrate_threshold(e_id)
    return Metrics(
        fpr95=fpr95(e_id, e_ood),
        auroc=auroc(e_id, e_ood),
        inlier_accuracy=float(inlier_accuracy),
        threshold=xi,
        n_id=len(e_id),
        n_ood=len(e_ood),
        degenerate_threshold=threshold_is_degenerate(e_id, xi),
    )


def inlier_accuracy(logits, labels) -> float:
    """Argmax over all K+1 logits against the true label."""
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise InvalidArgument("no labelled samples")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- figure data ---------------------------------------------------------------


def histogram_rows(groups: dict, bins: int):
    """Shared equal-width histogram over pooled values of every group.

    ``groups`` maps group name to an array of log-likelihoods (may be empty).
    Returns ``[(group, left, right, count), ...]``.
    """
    if bins < 1:
        raise InvalidArgument("bins must be >= 1")
    arrays = {g: np.asarray(v, dtype=np.float64).ravel() for g, v in groups.items()}
    pooled = np.concatenate([v for v in arrays.values() if v.size])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    rows = []
    for g, v in arrays.items():
        counts, _ = np.histogram(v, bins=edges)
        rows.extend((g, float(edges[i]), float(edges[i + 1]), int(counts[i])) for i in range(bins))
    return rows


def export_histograms(model, id_features, background_features, outlier_features, bins, path):
    """Write log-likelihood histograms of the three groups as CSV; returns the rows."""
    from .flow import log_prob

    id_features = np.asarray(id_features, dtype=np.float64)
    if id_features.size == 0:
        raise InvalidArgument("histogram needs at least one inlier")

    def ll(x):
        x = np.asarray(x, dtype=np.float64)
        return log_prob(model, np.atleast_2d(x)) if x.size else np.empty(0)

    groups = {
        "id": ll(id_features),
        "background": ll(background_features),
        "synthetic_od": ll(outlier_features),
    }
    rows = histogram_rows(groups, bins)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "bin_left", "bin_right", "count"])
        for g, a, b, c in rows:
            w.writerow([g, repr(a), repr(b), c])
    return rows, groups


def export_pca(id_features, labels, outlier_features, path):
    """PCA basis fitted on inliers only; outliers (label -1) projected into it."""
    id_features = np.atleast_2d(np.asarray(id_features, dtype=np.float64))
    res = pca_top2(id_features)
    out = np.asarray(outlier_features, dtype=np.float64)
    out_pts = project(res, np.atleast_2d(out)) if out.size else np.empty((0, 2))
    rows = [(int(l), *map(float, p)) for l, p in zip(labels, res.points)]
    rows += [(-1, *map(float, p)) for p in out_pts]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "pc1", "pc2"])
        for lab, a, b in rows:
            w.writerow([lab, repr(a), repr(b)])
    return rows, res
