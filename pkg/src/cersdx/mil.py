"""Gated-attention MIL classifier with hand-written backprop.

Forward pass for one bag ``X`` (N x D)::

    h   = relu(X W1^T + b1)                     (N x L)   dropout m1
    g   = tanh(h Va^T + ba) * sigmoid(h Ua^T + bu)   (N x H)   dropout m2
    a   = softmax_N(g w^T)                       (N x heads)
    z   = a^T h                                  (heads x L)
    out = Wc z + bc

With one attention head the classifier sees the single pooled vector.  With
``heads == n_classes`` (multi-branch) class ``c`` reads its own pooled
vector: ``out_c = Wc[c] . z_c + bc[c]``.

Everything is float64; bags are cast on entry.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bags import EmbeddingBag
from .errors import DataError, NumericError
from .optim import Adam

PARAM_NAMES = ("W1", "b1", "Va", "ba", "Ua", "bu", "w", "Wc", "bc")
BODY_NAMES = PARAM_NAMES[:7]


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, label: int) -> float:
    m = logits.max()
    return float(m + np.log(np.exp(logits - m).sum()) - logits[label])


@dataclass
class GatedMilModel:
    params: dict
    n_classes: int
    dropout: float = 0.25
    multi_branch: bool = False

    @classmethod
    def init(cls, dim, n_classes=2, latent=512, hidden=384, dropout=0.25, multi_branch=False, seed=0):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {dropout}")
        rng = np.random.default_rng(seed)
        heads = n_classes if multi_branch else 1

        def xavier(rows, cols):
            return rng.normal(0.0, math.sqrt(2.0 / (rows + cols)), size=(rows, cols))

        params = {
            "W1": xavier(latent, dim),
            "b1": np.zeros(latent),
            "Va": xavier(hidden, latent),
            "ba": np.zeros(hidden),
            "Ua": xavier(hidden, latent),
            "bu": np.zeros(hidden),
            "w": xavier(heads, hidden),
            "Wc": xavier(n_classes, latent),
            "bc": np.zeros(n_classes),
        }
        return cls(params, n_classes, dropout, multi_branch)

    # shapes -------------------------------------------------------------
    @property
    def dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def latent(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["Va"].shape[0]

    @property
    def heads(self) -> int:
        return self.params["w"].shape[0]

    def copy(self) -> "GatedMilModel":
        return GatedMilModel({k: v.copy() for k, v in self.params.items()}, self.n_classes, self.dropout, self.multi_branch)

    # serialisation ------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "kind": "gated_mil",
            "n_classes": self.n_classes,
            "dropout": self.dropout,
            "multi_branch": self.multi_branch,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
            "params": {k: v.ravel().tolist() for k, v in self.params.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GatedMilModel":
        if d.get("kind") != "gated_mil":
            raise DataError("not a gated_mil model file")
        params = {
            k: np.asarray(d["params"][k], dtype=np.float64).reshape(d["shapes"][k]) for k in PARAM_NAMES
        }
        return cls(params, int(d["n_classes"]), float(d["dropout"]), bool(d["multi_branch"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "GatedMilModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _as_matrix(bag, model: GatedMilModel) -> np.ndarray:
    X = bag.instances if isinstance(bag, EmbeddingBag) else bag
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.dim:
        raise DataError(f"bag dim {X.shape[-1]} does not match model dim {model.dim}")
    return X


def sample_masks(model: GatedMilModel, n: int, rng) -> dict:
    keep = 1.0 - model.dropout
    return {
        "m1": (rng.random((n, model.latent)) < keep) / keep,
        "m2": (rng.random((n, model.hidden)) < keep) / keep,
    }


def forward_cache(X: np.ndarray, model: GatedMilModel, masks: dict | None = None):
    p = model.params
    pre1 = X @ p["W1"].T + p["b1"]
    h = np.maximum(pre1, 0.0)
    if masks is not None:
        h = h * masks["m1"]
    A = np.tanh(h @ p["Va"].T + p["ba"])
    G = sigmoid(h @ p["Ua"].T + p["bu"])
    P = A * G
    if masks is not None:
        P = P * masks["m2"]
    att = softmax(P @ p["w"].T, axis=0)  # (N, heads)
    Z = att.T @ h
    if model.multi_branch:
        logits = (p["Wc"] * Z).sum(axis=1) + p["bc"]
    else:
        logits = p["Wc"] @ Z[0] + p["bc"]
    cache = {"X": X, "pre1": pre1, "h": h, "A": A, "G": G, "P": P, "att": att, "Z": Z, "masks": masks}
    return logits, cache


def mil_forward(bag, model: GatedMilModel, mode: str = "eval", rng=None):
    """Return ``(logits, attention)``.

    In ``"train"`` mode dropout masks are drawn from ``rng``.  Attention has
    shape ``(N,)`` for a single head and ``(N, heads)`` otherwise.
    """
    X = _as_matrix(bag, model)
    masks = None
    if mode == "train" and model.dropout > 0:
        masks = sample_masks(model, len(X), rng if rng is not None else np.random.default_rng())
    elif mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    logits, cache = forward_cache(X, model, masks)
    att = cache["att"]
    return logits, (att[:, 0] if att.shape[1] == 1 else att)


def backward_body(cache: dict, model: GatedMilModel, dZ: np.ndarray) -> dict:
    """Gradients of the body parameters given dL/dZ (heads x L)."""
    p = model.params
    X, h, A, G, P, att = (cache[k] for k in ("X", "h", "A", "G", "P", "att"))
    masks = cache["masks"]

    dh = att @ dZ
    datt = h @ dZ.T
    dE = att * (datt - (att * datt).sum(axis=0, keepdims=True))
    grads = {"w": dE.T @ P}
    dP = dE @ p["w"]
    if masks is not None:
        dP = dP * masks["m2"]
    dSa = dP * G * (1.0 - A * A)
    dSg = dP * A * G * (1.0 - G)
    grads["Va"] = dSa.T @ h
    grads["ba"] = dSa.sum(axis=0)
    grads["Ua"] = dSg.T @ h
    grads["bu"] = dSg.sum(axis=0)
    dh += dSa @ p["Va"] + dSg @ p["Ua"]
    if masks is not None:
        dh = dh * masks["m1"]
    dpre = dh * (cache["pre1"] > 0)
    grads["W1"] = dpre.T @ X
    grads["b1"] = dpre.sum(axis=0)
    return grads


def backward(cache: dict, model: GatedMilModel, dlogits: np.ndarray) -> dict:
    p = model.params
    Z = cache["Z"]
    if model.multi_branch:
        dWc = dlogits[:, None] * Z
        dZ = dlogits[:, None] * p["Wc"]
    else:
        dWc = np.outer(dlogits, Z[0])
        dZ = (p["Wc"].T @ dlogits)[None, :]
    grads = backward_body(cache, model, dZ)
    grads["Wc"] = dWc
    grads["bc"] = dlogits.copy()
    return grads


def mil_loss_and_gradients(bag, label: int, model: GatedMilModel, masks: dict | None = None):
    X = _as_matrix(bag, model)
    logits, cache = forward_cache(X, model, masks)
    probs = softmax(logits)
    dlogits = probs.copy()
    dlogits[label] -= 1.0
    return cross_entropy(logits, label), backward(cache, model, dlogits)


def mil_gradients(bag, label: int, model: GatedMilModel, masks: dict | None = None) -> dict:
    """Exact gradients of cross-entropy w.r.t. every parameter.

    Without ``masks`` the eval-mode (dropout-free) forward is differentiated.
    """
    return mil_loss_and_gradients(bag, label, model, masks)[1]


def mil_loss(bag, label: int, model: GatedMilModel) -> float:
    logits, _ = mil_forward(bag, model, "eval")
    return cross_entropy(logits, label)


def embed(bag, model: GatedMilModel) -> np.ndarray:
    """Eval-mode pooled representation (single head: ``(L,)``)."""
    X = _as_matrix(bag, model)
    _, cache = forward_cache(X, model)
    return cache["Z"][0] if model.heads == 1 else cache["Z"]


def predict_proba(bags, model: GatedMilModel) -> np.ndarray:
    return np.array([softmax(mil_forward(b, model, "eval")[0]) for b in bags])


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

@dataclass
class MilConfig:
    lr: float = 1e-4
    max_epochs: int = 100
    patience: int = 10
    weight_decay: float = 1e-5
    latent: int = 512
    hidden: int = 384
    dropout: float = 0.25
    multi_branch: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1

    def to_dict(self):
        return asdict(self)


def mean_loss(bags, labels, model) -> float:
    return float(np.mean([mil_loss(b, int(y), model) for b, y in zip(bags, labels)]))


def train_mil(bags, labels, train_idx, val_idx=None, config: MilConfig | None = None, model=None):
    """Adam over single bags; returns the best-validation-loss model.

    ``val_idx`` empty or None falls back to the training loss for model
    selection and early stopping.
    """
    config = config or MilConfig()
    labels = np.asarray(labels, dtype=np.int64)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = train_idx if val_idx is None or len(val_idx) == 0 else np.asarray(val_idx, dtype=np.int64)
    if len(np.unique(labels[train_idx])) < 2:
        raise DataError("training fold must contain at least two classes")
    n_classes = int(labels.max()) + 1

    rng = np.random.default_rng(config.seed)
    if model is None:
        model = GatedMilModel.init(
            bags[train_idx[0]].dim, n_classes, config.latent, config.hidden,
            config.dropout, config.multi_branch, seed=int(rng.integers(2**31)),
        )
    X = {int(i): np.asarray(bags[i].instances, dtype=np.float64) for i in np.concatenate([train_idx, val_idx])}
    opt = Adam(model.params, lr=config.lr, weight_decay=config.weight_decay)
    history = TrainHistory()
    best = (np.inf, model.copy())
    bad = 0
    for epoch in range(config.max_epochs):
        total = 0.0
        for i in rng.permutation(train_idx):
            masks = sample_masks(model, len(X[i]), rng) if model.dropout > 0 else None
            loss, grads = mil_loss_and_gradients(X[i], int(labels[i]), model, masks)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            total += loss
            opt.step(grads)
        history.train_loss.append(total / len(train_idx))
        val = float(np.mean([mil_loss(X[i], int(labels[i]), model) for i in val_idx]))
        history.val_loss.append(val)
        if val < best[0]:
            best = (val, model.copy())
            history.best_epoch = epoch
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                break
    return best[1], history


def top_k_patches(bag: EmbeddingBag, model: GatedMilModel, k: int):
    """Coordinates of the ``k`` highest-attention instances.

    Returns ``(coords (k, 2), attention (k,), index (k,))``; ties go to the
    lower instance index.  Multi-branch models rank by the predicted class's
    head.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    logits, att = mil_forward(bag, model, "eval")
    if att.ndim == 2:
        att = att[:, int(np.argmax(logits))]
    order = np.argsort(-att, kind="stable")[: min(k, len(att))]
    return bag.coords[order], att[order], order
