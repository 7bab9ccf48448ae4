"""Classification metrics, bootstrap intervals, threshold calibration and
embedding cluster statistics."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import DataError


def confusion_matrix(y_true, y_pred, n_classes: int | None = None) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise DataError("y_true and y_pred differ in length")
    if n_classes is None:
        n_classes = int(max(y_true.max(initial=-1), y_pred.max(initial=-1))) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _recalls(cm: np.ndarray) -> np.ndarray:
    support = cm.sum(axis=1)
    rec = np.full(len(cm), np.nan)
    ok = support > 0
    rec[ok] = np.diag(cm)[ok] / support[ok]
    return rec


def balanced_accuracy(y_true, y_pred, n_classes: int | None = None) -> float:
    """Mean recall over the classes present in ``y_true``."""
    y_true = np.asarray(y_true, dtype=np.int64)
    cm = confusion_matrix(y_true, y_pred, n_classes)
    rec = _recalls(cm)
    present = np.zeros(len(cm), dtype=bool)
    present[np.unique(y_true)] = True
    return float(rec[present].mean())


def classification_metrics(y_true, y_pred, n_classes: int | None = None) -> dict:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = confusion_matrix(y_true, y_pred, n_classes)
    C = len(cm)
    rec = _recalls(cm)
    absent = np.flatnonzero(np.isnan(rec))
    if len(absent):
        warnings.warn(f"classes {absent.tolist()} absent from y_true; recall excluded", stacklevel=2)
    col = cm.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        prec = np.where(col > 0, np.diag(cm) / np.maximum(col, 1), 0.0)
        rec0 = np.nan_to_num(rec)
        f1 = np.where(prec + rec0 > 0, 2 * prec * rec0 / (prec + rec0), 0.0)
    out = {
        "accuracy": float(np.trace(cm) / cm.sum()) if cm.sum() else float("nan"),
        "bacc": float(np.nanmean(rec)),
        "per_class_recall": rec.tolist(),
        "confusion": cm.tolist(),
    }
    if C == 2:
        tn, fp, fn, tp = cm.ravel()
        out["sensitivity"] = float(rec[1])
        out["specificity"] = float(rec[0])
        out["precision"] = float(prec[1])
        out["f1"] = float(f1[1])
    else:
        present = ~np.isnan(rec)
        out["precision"] = float(prec[present].mean())
        out["f1"] = float(f1[present].mean())
    return out


def roc_auc(scores, labels, backend=None) -> float:
    """AUC as the Mann-Whitney probability P(score_pos > score_neg), ties 1/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos, neg = scores[labels], scores[~labels]
    if len(pos) == 0 or len(neg) == 0:
        raise DataError("roc_auc needs both positive and negative samples")
    twice_u = kernels.mann_whitney_twice_u(pos, neg, backend=backend)
    return twice_u / (2.0 * len(pos) * len(neg))


def bootstrap_ci(metric, *arrays, n_boot: int = 1000, seed: int = 0, level: float = 0.95):
    """Percentile bootstrap interval of ``metric(*resampled_arrays)``.

    Arrays are resampled jointly along axis 0.  Resamples on which the metric
    raises :class:`DataError` (e.g. a single-class draw for AUC) are skipped.
    """
    arrays = [np.asarray(a) for a in arrays]
    n = len(arrays[0])
    if n < 2:
        raise DataError("bootstrap needs at least two samples")
    if any(len(a) != n for a in arrays):
        raise DataError("bootstrap arrays differ in length")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(n_boot, n))
    vals = []
    for row in idx:
        try:
            vals.append(metric(*(a[row] for a in arrays)))
        except DataError:
            continue
    if not vals:
        raise DataError("metric undefined on every bootstrap resample")
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(np.asarray(vals, dtype=np.float64), [tail, 100.0 - tail])
    return float(lo), float(hi)


def log_odds_gain(p_model, p_base, eps: float = 1e-6):
    """Natural-log odds ratio logit(p_model) - logit(p_base).

    Proportions outside ``[eps, 1 - eps]`` are clamped with a warning.
    """
    pm = np.asarray(p_model, dtype=np.float64)
    pb = np.asarray(p_base, dtype=np.float64)
    if np.any((pm < eps) | (pm > 1 - eps) | (pb < eps) | (pb > 1 - eps)):
        warnings.warn("proportion clamped to [1e-6, 1 - 1e-6] for log-odds", stacklevel=2)
    pm = np.clip(pm, eps, 1 - eps)
    pb = np.clip(pb, eps, 1 - eps)
    out = np.log(pm / (1 - pm)) - np.log(pb / (1 - pb))
    return float(out) if out.ndim == 0 else out


def sensitivity_at(scores, labels, t: float) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    return float((scores[labels] >= t).mean())


def calibrate_threshold(scores, labels, target_sensitivity: float = 0.8) -> float:
    """Largest observed score ``t`` with sensitivity(score >= t) >= target."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    pos = np.sort(scores[labels])
    if len(pos) == 0:
        raise DataError("calibration needs at least one positive sample")
    cand = np.unique(scores)[::-1]
    # number of positives with score >= each candidate
    captured = len(pos) - np.searchsorted(pos, cand, side="left")
    ok = captured / len(pos) >= target_sensitivity
    if not ok.any():
        return float(pos[0])
    return float(cand[np.argmax(ok)])


def binary_report(scores, labels, threshold: float) -> dict:
    pred = (np.asarray(scores) >= threshold).astype(np.int64)
    return classification_metrics(np.asarray(labels, dtype=np.int64), pred, 2)


# --------------------------------------------------------------------------
# cluster statistics
# --------------------------------------------------------------------------

def wasserstein_1d(a, b) -> float:
    """W1 between two empirical 1-D distributions: integral of |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise DataError("wasserstein needs non-empty samples")
    allv = np.sort(np.concatenate([a, b]))
    deltas = np.diff(allv)
    fa = np.searchsorted(a, allv[:-1], side="right") / len(a)
    fb = np.searchsorted(b, allv[:-1], side="right") / len(b)
    return float(np.sum(np.abs(fa - fb) * deltas))


def gaussian_kl_diag(mu_p, var_p, mu_q, var_q) -> float:
    return float(0.5 * np.sum(np.log(var_q / var_p) + (var_p + (mu_p - mu_q) ** 2) / var_q - 1.0))


def silhouette(x, labels, dist=None) -> float:
    labels = np.asarray(labels)
    if dist is None:
        dist = kernels.pairwise_distances(x)
    classes = np.unique(labels)
    member = labels[:, None] == classes[None, :]  # (n, C)
    counts = member.sum(axis=0)
    sums = dist @ member  # (n, C) summed distance to each class
    own = np.argmax(member, axis=1)
    n_own = counts[own]
    a = sums[np.arange(len(x)), own] / np.maximum(n_own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(len(x)), own] = np.inf
    b = mean_other.min(axis=1)
    s = (b - a) / np.maximum(a, b)
    s[n_own < 2] = 0.0
    return float(s.mean())


def davies_bouldin(x, labels) -> float:
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    cents = np.stack([x[labels == c].mean(axis=0) for c in classes])
    scatter = np.array([np.linalg.norm(x[labels == c] - cents[i], axis=1).mean() for i, c in enumerate(classes)])
    sep = kernels.pairwise_distances(cents)
    ratio = (scatter[:, None] + scatter[None, :]) / np.where(sep > 0, sep, np.nan)
    np.fill_diagonal(ratio, -np.inf)
    ratio = np.where(np.isnan(ratio), np.inf, ratio)
    return float(ratio.max(axis=1).mean())


@dataclass
class ClusterStats:
    classes: list
    silhouette: float
    davies_bouldin: float
    cosine_distance: np.ndarray  # (C, C) between centroids
    wasserstein: np.ndarray  # (C, C) along centroid-difference axis
    sym_kl: np.ndarray  # (C, C) between diagonal Gaussian fits
    excluded: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "classes": self.classes,
            "silhouette": self.silhouette,
            "davies_bouldin": self.davies_bouldin,
            "cosine_distance": self.cosine_distance.tolist(),
            "wasserstein": self.wasserstein.tolist(),
            "sym_kl": self.sym_kl.tolist(),
            "excluded": self.excluded,
        }


def cluster_stats(embeddings, labels, var_floor: float = 1e-6) -> ClusterStats:
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    excluded = classes[counts < 2].tolist()
    if excluded:
        warnings.warn(f"classes {excluded} have fewer than 2 points; excluded", stacklevel=2)
    keep = np.isin(labels, classes[counts >= 2])
    x, labels = x[keep], labels[keep]
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError("cluster statistics need at least two classes with >= 2 points")

    groups = [x[labels == c] for c in classes]
    cents = np.stack([g.mean(axis=0) for g in groups])
    variances = [np.maximum(g.var(axis=0), var_floor) for g in groups]
    C = len(classes)
    cos = np.zeros((C, C))
    w1 = np.zeros((C, C))
    kl = np.zeros((C, C))
    for i in range(C):
        for j in range(i + 1, C):
            ci, cj = cents[i], cents[j]
            denom = np.linalg.norm(ci) * np.linalg.norm(cj)
            cos[i, j] = cos[j, i] = 1.0 - float(ci @ cj / denom) if denom > 0 else 0.0
            axis = cj - ci
            norm = np.linalg.norm(axis)
            if norm > 0:
                axis = axis / norm
                w1[i, j] = w1[j, i] = wasserstein_1d(groups[i] @ axis, groups[j] @ axis)
            kl[i, j] = kl[j, i] = gaussian_kl_diag(ci, variances[i], cj, variances[j]) + gaussian_kl_diag(
                cj, variances[j], ci, variances[i]
            )
    return ClusterStats(
        classes.tolist(),
        silhouette(x, labels),
        davies_bouldin(x, labels),
        cos,
        w1,
        kl,
        excluded,
    )
