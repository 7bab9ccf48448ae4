"""Prompt-similarity zero-shot classification, Yes/No answer mapping and
caption metrics (ROUGE-L F1, corpus BLEU-n)."""

from __future__ import annotations

import math
import re
import string
import warnings
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import kernels
from .errors import DataError


@dataclass
class PromptSet:
    class_names: list
    embeddings: np.ndarray  # (C, M), rows unit-norm
    temperature: float = 0.07

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or len(self.embeddings) < 2:
            raise DataError("a prompt set needs at least two class embeddings")
        if len(self.class_names) != len(self.embeddings):
            raise DataError("one class name per prompt embedding")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise DataError("prompt embeddings must be unit-normalised")
        if not self.temperature > 0:
            raise DataError("temperature must be positive")

    @classmethod
    def from_raw(cls, class_names, embeddings, temperature=0.07):
        """Normalise raw prompt embeddings before building the set.

        Several prompts per class (a list of (k, M) arrays) are averaged
        first, then normalised.
        """
        rows = []
        for e in embeddings:
            e = np.asarray(e, dtype=np.float64)
            if e.ndim == 2:
                e = (e / np.linalg.norm(e, axis=1, keepdims=True)).mean(axis=0)
            rows.append(e / np.linalg.norm(e))
        return cls(list(class_names), np.stack(rows), temperature)

    def to_dict(self) -> dict:
        return {
            "class_names": list(self.class_names),
            "temperature": self.temperature,
            "embeddings": self.embeddings.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PromptSet":
        """Stored rows are taken as-is when already unit-norm (exact round
        trip); anything else goes through :meth:`from_raw`."""
        t = float(d.get("temperature", 0.07))
        try:
            return cls(list(d["class_names"]), d["embeddings"], t)
        except (DataError, ValueError):
            return cls.from_raw(d["class_names"], d["embeddings"], t)


def zero_shot_classify(image_emb, prompts: PromptSet):
    """Return ``(label, probs)`` from cosine similarity to each class prompt;
    ties resolve to the lowest class index."""
    x = np.asarray(image_emb, dtype=np.float64)
    if x.shape[-1] != prompts.embeddings.shape[1]:
        raise DataError(f"embedding dim {x.shape[-1]} != prompt dim {prompts.embeddings.shape[1]}")
    norm = np.linalg.norm(x)
    if norm == 0:
        raise DataError("zero-norm image embedding")
    sims = prompts.embeddings @ (x / norm)
    z = sims / prompts.temperature
    e = np.exp(z - z.max())
    probs = e / e.sum()
    return int(np.argmax(sims)), probs


class Answer(str, Enum):
    POSITIVE = "positive"
    NEGATIVE = "negative"
    UNPARSEABLE = "unparseable"


POSITIVE_WORDS = frozenset({"yes"})
NEGATIVE_WORDS = frozenset({"no"})
_PUNCT = str.maketrans({c: " " for c in string.punctuation})


def normalize_answer(text: str) -> list[str]:
    return text.lower().translate(_PUNCT).split()


def map_answer_to_label(text: str) -> Answer:
    """First token found in either lexicon decides; otherwise unparseable."""
    for tok in normalize_answer(text):
        if tok in POSITIVE_WORDS:
            return Answer.POSITIVE
        if tok in NEGATIVE_WORDS:
            return Answer.NEGATIVE
    return Answer.UNPARSEABLE


# --------------------------------------------------------------------------
# caption metrics
# --------------------------------------------------------------------------

def tokenize(text: str) -> list[str]:
    return normalize_answer(text)


def _ids(a: list[str], b: list[str]):
    vocab: dict[str, int] = {}
    ia = [vocab.setdefault(t, len(vocab)) for t in a]
    ib = [vocab.setdefault(t, len(vocab)) for t in b]
    return np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64)


def rouge_l(candidate, reference, backend=None) -> float:
    """ROUGE-L F1 (beta = 1) over token lists or raw strings."""
    cand = tokenize(candidate) if isinstance(candidate, str) else list(candidate)
    ref = tokenize(reference) if isinstance(reference, str) else list(reference)
    if not cand or not ref:
        warnings.warn("empty candidate or reference; ROUGE-L is 0", stacklevel=2)
        return 0.0
    lcs = kernels.lcs_length(*_ids(cand, ref), backend=backend)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return 2 * p * r / (p + r)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidates, references, n: int = 4) -> float:
    """Corpus BLEU with uniform weights over orders 1..n, no smoothing.

    ``candidates`` and ``references`` are aligned lists (strings or token
    lists); each candidate has one reference.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(candidates) == 0:
        raise DataError("empty corpus")
    if len(candidates) != len(references):
        raise DataError("candidates and references differ in length")
    matched = np.zeros(n)
    total = np.zeros(n)
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        c = tokenize(cand) if isinstance(cand, str) else list(cand)
        r = tokenize(ref) if isinstance(ref, str) else list(ref)
        c_len += len(c)
        r_len += len(r)
        for k in range(1, n + 1):
            cg, rg = _ngrams(c, k), _ngrams(r, k)
            matched[k - 1] += sum(min(cnt, rg[g]) for g, cnt in cg.items())
            total[k - 1] += max(len(c) - k + 1, 0)
    if np.any(matched == 0) or c_len == 0:
        return 0.0
    log_p = np.mean(np.log(matched / total))
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


def text_metrics(candidates, references, metrics=("rouge_l", "bleu1", "bleu3", "bleu5")) -> dict:
    out = {}
    for name in metrics:
        if name == "rouge_l":
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                out[name] = float(np.mean([rouge_l(c, r) for c, r in zip(candidates, references)]))
        elif re.fullmatch(r"bleu\d+", name):
            out[name] = bleu_n(candidates, references, int(name[4:]))
        else:
            raise DataError(f"unknown text metric {name!r}")
    return out
