"""Reciprocal-point (ARPL-style) open-set head, confidence thresholding and
OOD detection.

For an embedding ``z`` (length d) and reciprocal points ``P`` (K x d)::

    d_e(z, P_k) = ||z - P_k||^2 / d
    d_d(z, P_k) = z . P_k
    s_k         = d_e - d_d
    probs       = softmax(gamma * s)

A known-class sample should lie far from its own reciprocal point.  The
training loss adds ``lambda_o * (d_e(z, P_y) - R)^2`` which keeps known
samples on a shell of radius ``R`` around their reciprocal point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DataError, NoBimodalityError, NumericError
from .mil import GatedMilModel, backward_body, forward_cache, softmax
from .optim import Adam


@dataclass
class ReciprocalPointHead:
    points: np.ndarray  # (K, d)
    radius: float = 0.0
    gamma: float = 1.0
    lambda_o: float = 0.1

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise DataError("need at least two reciprocal points (K >= 2)")
        if self.radius < 0 or not self.gamma > 0 or self.lambda_o < 0:
            raise DataError("require radius >= 0, gamma > 0, lambda_o >= 0")

    @property
    def n_classes(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def to_dict(self) -> dict:
        return {
            "kind": "arpl_head",
            "shape": list(self.points.shape),
            "points": self.points.ravel().tolist(),
            "radius": self.radius,
            "gamma": self.gamma,
            "lambda_o": self.lambda_o,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ReciprocalPointHead":
        if d.get("kind") != "arpl_head":
            raise DataError("not an arpl_head file")
        pts = np.asarray(d["points"], dtype=np.float64).reshape(d["shape"])
        return cls(pts, float(d["radius"]), float(d["gamma"]), float(d["lambda_o"]))


def _check(z, head):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != head.dim:
        raise DataError(f"embedding dim {z.shape[-1]} != head dim {head.dim}")
    return z


def _distances(z, points):
    d = points.shape[1]
    diff = z[..., None, :] - points
    de = (diff * diff).sum(axis=-1) / d
    dd = z @ points.T
    return de, dd


def arpl_score(z, head: ReciprocalPointHead):
    """Return ``(scores, probs, confidence)``; works on one vector or a batch."""
    z = _check(z, head)
    de, dd = _distances(z, head.points)
    s = de - dd
    probs = softmax(head.gamma * s, axis=-1)
    return s, probs, probs.max(axis=-1)


def arpl_loss(z, label: int, head: ReciprocalPointHead) -> float:
    return arpl_loss_and_grads(z, label, head)[0]


def arpl_loss_and_grads(z, label: int, head: ReciprocalPointHead):
    """Loss and gradients ``(loss, dP, dR, dz)`` for one embedding."""
    z = _check(z, head)
    P = head.points
    d = head.dim
    if not 0 <= label < head.n_classes:
        raise DataError(f"label {label} outside [0, {head.n_classes})")
    de, dd = _distances(z, P)
    s = de - dd
    logits = head.gamma * s
    m = logits.max()
    lse = m + math.log(np.exp(logits - m).sum())
    ce = lse - logits[label]
    margin = de[label] - head.radius
    loss = ce + head.lambda_o * margin * margin

    ds = np.exp(logits - lse)
    ds[label] -= 1.0
    ds *= head.gamma
    diff = z - P  # (K, d)
    # ds_k/dz = 2 (z - P_k)/d - P_k ; ds_k/dP_k = -2 (z - P_k)/d - z
    dz = (ds[:, None] * (2.0 * diff / d - P)).sum(axis=0)
    dP = ds[:, None] * (-2.0 * diff / d - z)
    dmargin = 2.0 * head.lambda_o * margin
    dz += dmargin * 2.0 * diff[label] / d
    dP[label] += dmargin * (-2.0 * diff[label] / d)
    dR = -dmargin
    return float(loss), dP, float(dR), dz


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class ArplConfig:
    gamma: float = 1.0
    lambda_o: float = 0.1
    lr: float = 1e-3
    max_epochs: int = 30
    patience: int = 5
    joint: bool = False
    body_lr: float = 1e-4
    init_scale: float = 0.1
    seed: int = 0


@dataclass
class ArplResult:
    head: ReciprocalPointHead
    body: GatedMilModel | None
    train_loss: list = field(default_factory=list)
    closed_set_bacc: float = float("nan")


def pooled_features(bags, body: GatedMilModel) -> np.ndarray:
    from .mil import embed

    return np.stack([embed(b, body) for b in bags])


def _predict(head, feats):
    s, _, conf = arpl_score(feats, head)
    return s.argmax(axis=-1), conf


def train_arpl(features, labels, config: ArplConfig | None = None, *, bags=None, body=None, val_idx=None):
    """Fit reciprocal points and the shared radius.

    ``features`` are fixed pooled embeddings (n x d).  With ``config.joint``
    the MIL ``body`` is tuned as well and ``bags`` must be given; features
    are then recomputed from the body on every step.
    """
    from .metrics import balanced_accuracy

    config = config or ArplConfig()
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if len(classes) < 2:
        raise DataError("open-set training needs at least two known classes")
    K = int(labels.max()) + 1
    rng = np.random.default_rng(config.seed)

    if config.joint:
        if bags is None or body is None:
            raise ValueError("joint training needs bags and a body model")
        body = body.copy()
        feats = pooled_features(bags, body)
    else:
        feats = np.asarray(features, dtype=np.float64)
    n, d = feats.shape

    P = config.init_scale * rng.standard_normal((K, d))
    de0 = ((feats[:, None, :] - P) ** 2).sum(axis=-1) / d
    R = float(de0[np.arange(n), labels].mean())
    head = ReciprocalPointHead(P, R, config.gamma, config.lambda_o)
    params = {"P": head.points, "R": np.array([R])}
    opt = Adam(params, lr=config.lr)
    body_opt = Adam(body.params, lr=config.body_lr) if config.joint else None

    train_loss = []
    best = (np.inf, None, None, None)
    bad = 0
    monitor = np.arange(n) if val_idx is None else np.asarray(val_idx)
    for epoch in range(config.max_epochs):
        total = 0.0
        for i in rng.permutation(n):
            y = int(labels[i])
            if config.joint:
                X = np.asarray(bags[i].instances, dtype=np.float64)
                _, cache = forward_cache(X, body)
                z = cache["Z"][0]
            else:
                z = feats[i]
            head.radius = float(params["R"][0])
            loss, dP, dR, dz = arpl_loss_and_grads(z, y, head)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite ARPL loss at epoch {epoch}")
            total += loss
            opt.step({"P": dP, "R": np.array([dR])})
            params["R"][0] = max(params["R"][0], 0.0)
            if config.joint:
                body_opt.step(backward_body(cache, body, dz[None, :]))
        head.radius = float(params["R"][0])
        train_loss.append(total / n)
        if config.joint:
            feats = pooled_features(bags, body)
        mon = float(np.mean([arpl_loss(feats[i], int(labels[i]), head) for i in monitor]))
        if mon < best[0]:
            best = (mon, head.points.copy(), head.radius, body.copy() if config.joint else None)
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break

    head = ReciprocalPointHead(best[1], best[2], config.gamma, config.lambda_o)
    out_body = best[3] if config.joint else body
    if config.joint:
        feats = pooled_features(bags, out_body)
    pred, _ = _predict(head, feats)
    return ArplResult(head, out_body, train_loss, balanced_accuracy(labels, pred))


# --------------------------------------------------------------------------
# thresholds and detection
# --------------------------------------------------------------------------

def bimodal_threshold(confidences, bins: int = 256, backend=None) -> float:
    """Otsu threshold over a ``bins``-bin histogram spanning [min, max].

    When the between-class variance is maximal over a run of empty bins the
    midpoint of that run is returned.
    """
    c = np.asarray(confidences, dtype=np.float64).ravel()
    if c.size < 2:
        raise NoBimodalityError("need at least two values")
    lo, hi = float(c.min()), float(c.max())
    if lo == hi:
        raise NoBimodalityError("all confidences are equal; no bimodality")
    hist, edges = np.histogram(c, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    first, last = kernels.otsu_split(hist, centers, backend=backend)
    # threshold sits on the upper edge of the last bin of class 0
    return float(0.5 * (edges[first + 1] + edges[last + 1]))


@dataclass
class DetectionResult:
    flags: np.ndarray
    detection_rate: float | None  # None when there are no OOD samples
    threshold: float

    @property
    def has_ood(self) -> bool:
        return self.detection_rate is not None


def detect_ood(confidences, is_ood, threshold: float) -> DetectionResult:
    """Flag samples with confidence below ``threshold`` as OOD."""
    if not math.isfinite(threshold):
        raise DataError("threshold must be finite")
    c = np.asarray(confidences, dtype=np.float64)
    ood = np.asarray(is_ood, dtype=bool)
    flags = c < threshold
    rate = float(flags[ood].mean()) if ood.any() else None
    return DetectionResult(flags, rate, float(threshold))


def save_head(head: ReciprocalPointHead, path, body: GatedMilModel | None = None) -> None:
    d = head.to_dict()
    if body is not None:
        d["body"] = body.to_dict()
    Path(path).write_text(json.dumps(d))


def load_head(path):
    d = json.loads(Path(path).read_text())
    body = GatedMilModel.from_dict(d["body"]) if "body" in d else None
    return ReciprocalPointHead.from_dict(d), body
