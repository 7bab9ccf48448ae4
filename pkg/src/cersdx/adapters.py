"""LoRA layers, the projection MLP, linear probes and a linear segmentation
head trained with Dice loss."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError
from .optim import Adam, ReduceLROnPlateau

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
MAX_PROBE_EPOCHS = 80


def preprocess_image(rgb, size: int = 224) -> np.ndarray:
    """Resize an 8-bit RGB image to ``size`` x ``size`` (bilinear) and apply
    ImageNet normalisation.  Returns float32 (size, size, 3)."""
    from PIL import Image

    im = Image.fromarray(np.asarray(rgb, dtype=np.uint8)).resize((size, size), Image.BILINEAR)
    x = np.asarray(im, dtype=np.float32) / 255.0
    return (x - np.array(IMAGENET_MEAN, dtype=np.float32)) / np.array(IMAGENET_STD, dtype=np.float32)


# --------------------------------------------------------------------------
# LoRA
# --------------------------------------------------------------------------

@dataclass
class LoraLayer:
    """``W0 + alpha * U @ V`` with ``W0`` frozen (read-only)."""

    W0: np.ndarray  # (d2, d1)
    U: np.ndarray  # (d2, r)
    V: np.ndarray  # (r, d1)
    alpha: float = 64.0
    dropout: float = 0.25

    def __post_init__(self):
        self.W0 = np.array(self.W0, dtype=np.float64)
        self.W0.flags.writeable = False
        d2, d1 = self.W0.shape
        r = self.U.shape[1]
        if self.U.shape != (d2, r) or self.V.shape != (r, d1):
            raise DataError(f"factor shapes {self.U.shape}, {self.V.shape} do not fit W0 {self.W0.shape}")
        if not 1 <= r < min(d1, d2):
            raise DataError(f"rank {r} must satisfy 1 <= r < min(d1, d2) = {min(d1, d2)}")

    @property
    def rank(self) -> int:
        return self.U.shape[1]

    def to_dict(self) -> dict:
        return {
            "kind": "lora",
            "alpha": self.alpha,
            "dropout": self.dropout,
            "shapes": {"W0": list(self.W0.shape), "U": list(self.U.shape), "V": list(self.V.shape)},
            "W0": self.W0.ravel().tolist(),
            "U": self.U.ravel().tolist(),
            "V": self.V.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoraLayer":
        s = d["shapes"]
        arr = {k: np.asarray(d[k], dtype=np.float64).reshape(s[k]) for k in ("W0", "U", "V")}
        return cls(arr["W0"], arr["U"], arr["V"], float(d["alpha"]), float(d["dropout"]))


def lora_init(W0, r: int = 64, alpha: float = 64.0, dropout: float = 0.25, seed: int = 0) -> LoraLayer:
    """Zero ``U`` and Gaussian ``V`` with variance ``1/r``: merges to ``W0``."""
    W0 = np.asarray(W0, dtype=np.float64)
    d2, d1 = W0.shape
    if not 1 <= r < min(d1, d2):
        raise DataError(f"rank {r} must satisfy 1 <= r < min(d1, d2) = {min(d1, d2)}")
    rng = np.random.default_rng(seed)
    V = rng.normal(0.0, 1.0 / math.sqrt(r), size=(r, d1))
    return LoraLayer(W0, np.zeros((d2, r)), V, alpha, dropout)


def lora_merge(layer: LoraLayer) -> np.ndarray:
    return layer.W0 + layer.alpha * (layer.U @ layer.V)


def lora_forward(x, layer: LoraLayer, mode: str = "eval", rng=None, mask=None):
    """``W0 x + alpha * U (V dropout(x))``; dropout only on the adapter path.

    ``x`` may be a vector (d1,) or a batch (n, d1).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.W0.shape[1]:
        raise DataError(f"input dim {x.shape[-1]} != {layer.W0.shape[1]}")
    base = x @ layer.W0.T
    xa = x
    if mode == "train" and layer.dropout > 0:
        if mask is None:
            rng = rng if rng is not None else np.random.default_rng()
            keep = 1.0 - layer.dropout
            mask = (rng.random(x.shape) < keep) / keep
        xa = x * mask
    elif mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return base + layer.alpha * ((xa @ layer.V.T) @ layer.U.T)


def lora_backward(x, layer: LoraLayer, dy, mask=None):
    """Gradients ``(dU, dV, dx)`` of a scalar loss given ``dy = dL/dy`` for a
    batch ``x`` (n, d1).  ``W0`` gets none: it is frozen."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    dy = np.atleast_2d(np.asarray(dy, dtype=np.float64))
    xa = x if mask is None else x * mask
    t = xa @ layer.V.T  # (n, r)
    dU = layer.alpha * dy.T @ t
    dt = layer.alpha * dy @ layer.U  # (n, r)
    dV = dt.T @ xa
    dxa = dt @ layer.V
    dx = dy @ layer.W0 + (dxa if mask is None else dxa * mask)
    return dU, dV, dx


@dataclass
class ProjectionMLP:
    """Two-layer GELU MLP mapping visual tokens into a language-model width."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, in_dim: int, hidden: int = 3584, out_dim: int = 3584, seed: int = 0):
        rng = np.random.default_rng(seed)
        return cls(
            rng.normal(0, 1 / math.sqrt(in_dim), (hidden, in_dim)),
            np.zeros(hidden),
            rng.normal(0, 1 / math.sqrt(hidden), (out_dim, hidden)),
            np.zeros(out_dim),
        )

    def __call__(self, x):
        h = np.asarray(x, dtype=np.float64) @ self.W1.T + self.b1
        h = 0.5 * h * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (h + 0.044715 * h**3)))
        return h @ self.W2.T + self.b2


# --------------------------------------------------------------------------
# linear probe
# --------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    dim: int  # M, embedding dimension
    n_classes: int  # C
    lr: float = 1e-4
    max_epochs: int = MAX_PROBE_EPOCHS
    batch_size: int = 32
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.n_classes < 2:
            raise DataError("probe needs dim >= 1 and at least two classes")
        if not 1 <= self.max_epochs <= MAX_PROBE_EPOCHS:
            raise DataError(f"max_epochs must be in [1, {MAX_PROBE_EPOCHS}]")

    @property
    def l2(self) -> float:
        """Regularisation weight 100 / (M * C)."""
        return 100.0 / (self.dim * self.n_classes)


@dataclass
class LinearProbe:
    W: np.ndarray  # (C, M)
    b: np.ndarray

    def logits(self, x):
        return np.asarray(x, dtype=np.float64) @ self.W.T + self.b

    def predict(self, x):
        return self.logits(x).argmax(axis=-1)

    def to_dict(self) -> dict:
        return {"kind": "linear_probe", "shape": list(self.W.shape), "W": self.W.ravel().tolist(), "b": self.b.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearProbe":
        return cls(np.asarray(d["W"], dtype=np.float64).reshape(d["shape"]), np.asarray(d["b"], dtype=np.float64))


@dataclass
class ProbeHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.train_loss)


def _softmax(z):
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def probe_loss(probe: LinearProbe, x, y, l2: float) -> float:
    z = probe.logits(x)
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    return float(np.mean(lse - z[np.arange(len(y)), y]) + l2 * np.sum(probe.W**2))


def train_linear_probe(features, labels, config: ProbeConfig, val=None):
    """Minibatch Adam on mean cross-entropy + ``l2 * ||W||_F^2``.

    The plateau schedule watches the validation loss (training loss when
    ``val`` is None); training stops after ``max_epochs`` or once the
    learning rate has reached its floor.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or x.shape[1] != config.dim:
        raise DataError(f"features must be (n, {config.dim})")
    if len(np.unique(y)) < 2:
        raise DataError("linear probe needs at least two classes in the training data")
    if y.min() < 0 or y.max() >= config.n_classes:
        raise DataError("labels outside [0, n_classes)")
    rng = np.random.default_rng(config.seed)
    probe = LinearProbe(np.zeros((config.n_classes, config.dim)), np.zeros(config.n_classes))
    params = {"W": probe.W, "b": probe.b}
    opt = Adam(params, lr=config.lr)
    sched = ReduceLROnPlateau(opt, config.plateau_factor, config.plateau_patience, config.min_lr)
    hist = ProbeHistory()
    lam = config.l2
    onehot = np.eye(config.n_classes)
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            bi = order[start : start + config.batch_size]
            p = _softmax(probe.logits(x[bi]))
            d = (p - onehot[y[bi]]) / len(bi)
            opt.step({"W": d.T @ x[bi] + 2.0 * lam * probe.W, "b": d.sum(axis=0)})
        tl = probe_loss(probe, x, y, lam)
        if not math.isfinite(tl):
            raise NumericError(f"non-finite probe loss at epoch {epoch}")
        hist.train_loss.append(tl)
        hist.lr.append(opt.lr)
        monitor = tl
        if val is not None:
            monitor = probe_loss(probe, val[0], np.asarray(val[1], dtype=np.int64), lam)
            hist.val_loss.append(monitor)
        sched.step(monitor)
        if sched.at_floor:
            break
    return probe, hist


# --------------------------------------------------------------------------
# segmentation head
# --------------------------------------------------------------------------

DICE_EPS = 1e-6


def dice_loss(pred, target, eps: float = DICE_EPS) -> float:
    """``1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)``."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise DataError(f"shape mismatch {p.shape} vs {t.shape}")
    return float(1.0 - (2.0 * np.sum(p * t) + eps) / (p.sum() + t.sum() + eps))


def iou(pred_mask, target_mask) -> float:
    """Foreground IoU; two empty masks score 1.0."""
    p = np.asarray(pred_mask, dtype=bool)
    t = np.asarray(target_mask, dtype=bool)
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def block_sum(masks, factor: int) -> np.ndarray:
    """Sum ``factor`` x ``factor`` blocks of (n, H, W) masks -> (n, H/f, W/f)."""
    n, H, W = masks.shape
    if H % factor or W % factor:
        raise DataError(f"mask size {H}x{W} is not a multiple of upsample factor {factor}")
    return masks.reshape(n, H // factor, factor, W // factor, factor).sum(axis=(2, 4))


@dataclass
class SegConfig:
    n_classes: int = 2
    upsample: int = 16
    lr: float = 1e-4
    max_epochs: int = MAX_PROBE_EPOCHS
    batch_size: int = 1
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    min_lr: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.max_epochs <= MAX_PROBE_EPOCHS:
            raise DataError(f"max_epochs must be in [1, {MAX_PROBE_EPOCHS}]")


@dataclass
class SegHead:
    """Per-token linear classifier over a g x g token grid, upsampled by
    nearest-neighbour repetition to the mask resolution."""

    W: np.ndarray  # (C, d)
    b: np.ndarray
    upsample: int = 16

    def token_probs(self, tokens):
        return _softmax(np.asarray(tokens, dtype=np.float64) @ self.W.T + self.b)

    def predict(self, tokens) -> np.ndarray:
        lab = self.token_probs(tokens).argmax(axis=-1)
        u = self.upsample
        return lab.repeat(u, axis=-2).repeat(u, axis=-1)


def _dice_terms(probs, targets_block, u2):
    """Per-image, per-class Dice loss (background included) and its gradient
    w.r.t. token probabilities, for predictions upsampled by block
    repetition."""
    C = probs.shape[-1]
    loss = 0.0
    grad = np.zeros_like(probs)
    n = probs.shape[0]
    for c in range(C):
        p = probs[..., c]
        T = targets_block[c]
        inter = (p * T).sum(axis=(1, 2))
        s = u2 * p.sum(axis=(1, 2)) + T.sum(axis=(1, 2))
        num = 2.0 * inter + DICE_EPS
        den = s + DICE_EPS
        loss += np.sum(1.0 - num / den)
        grad[..., c] = -(2.0 * T * den[:, None, None] - num[:, None, None] * u2) / (den**2)[:, None, None]
    k = n * C
    return loss / k, grad / k


def seg_loss(head: SegHead, tokens, masks, n_classes) -> float:
    probs = head.token_probs(tokens)
    blocks = [block_sum((masks == c).astype(np.float64), head.upsample) for c in range(n_classes)]
    return _dice_terms(probs, blocks, head.upsample**2)[0]


def train_seg_head(token_features, masks, config: SegConfig | None = None, val=None):
    """Fit a linear segmentation head with soft Dice loss averaged over
    classes.  Returns ``(head, history)``; ``history["val_iou"]`` holds the
    held-out IoU when ``val = (tokens, masks)`` is given."""
    config = config or SegConfig()
    F = np.asarray(token_features, dtype=np.float64)
    M = np.asarray(masks, dtype=np.int64)
    if F.ndim != 4:
        raise DataError("token features must be (n, g, g, d)")
    n, g, _, d = F.shape
    if M.shape != (n, g * config.upsample, g * config.upsample):
        raise DataError(f"masks must be (n, {g * config.upsample}, {g * config.upsample})")
    if not (M > 0).any():
        raise DataError("every training mask is empty; nothing to segment")
    C = config.n_classes
    u2 = config.upsample**2
    blocks = np.stack([block_sum((M == c).astype(np.float64), config.upsample) for c in range(C)])

    rng = np.random.default_rng(config.seed)
    head = SegHead(np.zeros((C, d)), np.zeros(C), config.upsample)
    opt = Adam({"W": head.W, "b": head.b}, lr=config.lr)
    sched = ReduceLROnPlateau(opt, config.plateau_factor, config.plateau_patience, config.min_lr)
    history = {"train_loss": [], "val_loss": [], "val_iou": None}
    for epoch in range(config.max_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            bi = order[start : start + config.batch_size]
            probs = head.token_probs(F[bi])
            _, dp = _dice_terms(probs, blocks[:, bi], u2)
            dz = probs * (dp - (probs * dp).sum(axis=-1, keepdims=True))
            opt.step({"W": np.einsum("nijc,nijd->cd", dz, F[bi]), "b": dz.sum(axis=(0, 1, 2))})
        tl = seg_loss(head, F, M, C)
        if not math.isfinite(tl):
            raise NumericError(f"non-finite Dice loss at epoch {epoch}")
        history["train_loss"].append(tl)
        monitor = tl
        if val is not None:
            monitor = seg_loss(head, val[0], np.asarray(val[1]), C)
            history["val_loss"].append(monitor)
        sched.step(monitor)
        if sched.at_floor:
            break
    if val is not None:
        history["val_iou"] = mean_iou(head, val[0], val[1])
    return head, history


def mean_iou(head: SegHead, tokens, masks) -> float:
    pred = head.predict(tokens)
    masks = np.asarray(masks)
    return float(np.mean([iou(p > 0, m > 0) for p, m in zip(pred, masks)]))


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(obj))
