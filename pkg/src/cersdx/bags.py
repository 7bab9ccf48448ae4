"""Embedding bags, the ``CEB1`` file format, splits and synthetic cohorts."""

from __future__ import annotations

import csv
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"CEB1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class BagFormatError(DataError):
    code = "format"


class BadMagicError(BagFormatError):
    code = "bad_magic"


class BadVersionError(BagFormatError):
    code = "bad_version"


class TruncatedError(BagFormatError):
    code = "truncated"


class EmptyBagError(BagFormatError):
    code = "empty_bag"


@dataclass
class EmbeddingBag:
    slide_id: str
    instances: np.ndarray  # (N, D) float32
    coords: np.ndarray  # (N, 2) int32
    label: int | None = None

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float32)
        if self.instances.ndim != 2:
            raise DataError(f"instances must be 2-D, got shape {self.instances.shape}")
        n, d = self.instances.shape
        if n < 1 or d < 1:
            raise EmptyBagError(f"bag {self.slide_id!r} has N={n}, D={d}")
        if self.coords is None:
            self.coords = np.zeros((n, 2), dtype=np.int32)
        self.coords = np.asarray(self.coords, dtype=np.int32).reshape(-1, 2)
        if len(self.coords) != n:
            raise DataError(f"bag {self.slide_id!r}: {len(self.coords)} coords for {n} instances")
        if not np.all(np.isfinite(self.instances)):
            raise DataError(f"bag {self.slide_id!r} contains non-finite values")
        if self.label is not None and self.label < 0:
            self.label = None

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def __eq__(self, other):
        if not isinstance(other, EmbeddingBag):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and self.label == other.label
            and np.array_equal(self.coords, other.coords)
            and self.instances.tobytes() == other.instances.tobytes()
        )


def encode_bag(bag: EmbeddingBag) -> bytes:
    sid = bag.slide_id.encode("utf-8")
    if len(sid) > 0xFFFF:
        raise DataError("slide_id longer than 65535 bytes")
    label = -1 if bag.label is None else int(bag.label)
    return b"".join(
        [
            _HEADER.pack(MAGIC, VERSION, bag.n, bag.dim),
            struct.pack("<H", len(sid)),
            sid,
            struct.pack("<i", label),
            bag.coords.astype("<i4").tobytes(),
            bag.instances.astype("<f4").tobytes(),
        ]
    )


def decode_bag(buf: bytes) -> EmbeddingBag:
    if len(buf) < 4:
        raise TruncatedError("payload shorter than the magic")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    if len(buf) < _HEADER.size + 2:
        raise TruncatedError("truncated header")
    _, version, n, d = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise BadVersionError(f"unsupported CEB version {version}")
    if n == 0 or d == 0:
        raise EmptyBagError(f"N={n}, D={d}")
    pos = _HEADER.size
    (sid_len,) = struct.unpack_from("<H", buf, pos)
    pos += 2
    need = pos + sid_len + 4 + 8 * n + 4 * n * d
    if len(buf) < need:
        raise TruncatedError(f"expected {need} bytes, got {len(buf)}")
    slide_id = buf[pos : pos + sid_len].decode("utf-8")
    pos += sid_len
    (label,) = struct.unpack_from("<i", buf, pos)
    pos += 4
    coords = np.frombuffer(buf, dtype="<i4", count=2 * n, offset=pos).reshape(n, 2)
    pos += 8 * n
    inst = np.frombuffer(buf, dtype="<f4", count=n * d, offset=pos).reshape(n, d)
    return EmbeddingBag(slide_id, inst.astype(np.float32), coords.astype(np.int32), None if label < 0 else label)


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_bag(bag: EmbeddingBag, sink) -> None:
    """Write ``bag`` to a path (atomically) or a binary file object."""
    data = encode_bag(bag)
    if isinstance(sink, (str, os.PathLike)):
        _atomic_write(Path(sink), data)
    else:
        sink.write(data)


def read_bag(source) -> EmbeddingBag:
    if isinstance(source, (bytes, bytearray, memoryview)):
        return decode_bag(bytes(source))
    if isinstance(source, (str, os.PathLike)):
        return decode_bag(Path(source).read_bytes())
    return decode_bag(source.read())


# --------------------------------------------------------------------------
# manifests
# --------------------------------------------------------------------------

MANIFEST_FIELDS = ["slide_id", "label", "path", "n_signal"]


def write_manifest(rows: list[dict], path) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in MANIFEST_FIELDS})
    _atomic_write(Path(path), buf.getvalue().encode("utf-8"))


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        missing = [k for k in ("slide_id", "label", "path") if k not in row]
        if missing:
            raise DataError(f"{path}: manifest missing column(s) {missing}")
        p = Path(row["path"])
        if not p.is_absolute():
            p = path.parent / p
        out.append(
            {
                "slide_id": row["slide_id"],
                "label": int(row["label"]),
                "path": p,
                "n_signal": int(row.get("n_signal") or 0),
            }
        )
    return out


def load_manifest_bags(path) -> tuple[list[EmbeddingBag], np.ndarray]:
    rows = read_manifest(path)
    bags = [read_bag(r["path"]) for r in rows]
    labels = np.array([r["label"] for r in rows], dtype=np.int64)
    return bags, labels


# --------------------------------------------------------------------------
# synthetic cohorts
# --------------------------------------------------------------------------

SIGNAL_AXIS = 1
OOD_AXIS = 2


@dataclass
class SyntheticSpec:
    n_bags: int = 100  # per class
    n_instances: int = 50
    dim: int = 32
    k_signal: int = 3
    mu: float = 6.0
    nu: float = 6.0
    n_ood: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_bags", "n_instances", "dim", "k_signal"):
            if getattr(self, name) < 1:
                raise DataError(f"{name} must be positive")
        if self.mu < 0 or self.nu < 0 or self.n_ood < 0:
            raise DataError("mu, nu and n_ood must be non-negative")
        if self.k_signal > self.n_instances:
            raise DataError(f"k_signal={self.k_signal} exceeds bag size {self.n_instances}")
        if self.dim <= OOD_AXIS:
            raise DataError(f"dim must exceed {OOD_AXIS} so signal and OOD axes exist")


@dataclass
class SyntheticCohort:
    bags: list[EmbeddingBag]
    labels: np.ndarray
    signal_idx: list[np.ndarray]
    ood_bags: list[EmbeddingBag] = field(default_factory=list)


def _grid_coords(n: int, patch_px: int = 256) -> np.ndarray:
    side = int(np.ceil(np.sqrt(n)))
    i = np.arange(n)
    return np.stack([(i % side) * patch_px, (i // side) * patch_px], axis=1).astype(np.int32)


def generate_synthetic_bags(spec: SyntheticSpec) -> SyntheticCohort:
    """Class 0: pure N(0, I) instances.  Class 1: ``k_signal`` instances
    shifted by ``mu`` along the signal axis.  OOD bags: every instance
    shifted by ``nu`` along a second, orthogonal axis."""
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_instances, spec.dim
    coords = _grid_coords(n)
    bags, labels, signal = [], [], []
    for label in (0, 1):
        for b in range(spec.n_bags):
            x = rng.standard_normal((n, d))
            idx = np.zeros(0, dtype=np.int64)
            if label == 1:
                idx = np.sort(rng.choice(n, size=spec.k_signal, replace=False))
                x[idx, SIGNAL_AXIS] += spec.mu
            bags.append(EmbeddingBag(f"syn{label}_{b:04d}", x, coords, label))
            labels.append(label)
            signal.append(idx)
    ood = []
    for b in range(spec.n_ood):
        x = rng.standard_normal((n, d))
        x[:, OOD_AXIS] += spec.nu
        ood.append(EmbeddingBag(f"ood_{b:04d}", x, coords, None))
    return SyntheticCohort(bags, np.array(labels, dtype=np.int64), signal, ood)


def write_cohort(cohort: SyntheticCohort, out_dir) -> tuple[Path, Path | None]:
    """Write ``.ceb`` files plus ``manifest.csv`` (and ``ood_manifest.csv``)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for bag, sig in zip(cohort.bags, cohort.signal_idx):
        name = f"{bag.slide_id}.ceb"
        write_bag(bag, out / name)
        rows.append({"slide_id": bag.slide_id, "label": bag.label, "path": name, "n_signal": len(sig)})
    write_manifest(rows, out / "manifest.csv")
    ood_path = None
    if cohort.ood_bags:
        ood_rows = []
        for bag in cohort.ood_bags:
            name = f"{bag.slide_id}.ceb"
            write_bag(bag, out / name)
            ood_rows.append({"slide_id": bag.slide_id, "label": -1, "path": name, "n_signal": 0})
        ood_path = out / "ood_manifest.csv"
        write_manifest(ood_rows, ood_path)
    return out / "manifest.csv", ood_path


# --------------------------------------------------------------------------
# splits
# --------------------------------------------------------------------------

@dataclass
class DatasetSplit:
    folds: np.ndarray  # fold index per sample
    k: int
    seed: int

    def indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)

    def train_val_test(self, test_fold: int, val_fold: int | None = None):
        """Indices for (train, val, test); ``val_fold`` defaults to the next fold."""
        if val_fold is None:
            val_fold = (test_fold + 1) % self.k
        if val_fold == test_fold:
            raise ValueError("val_fold must differ from test_fold")
        rest = (self.folds != test_fold) & (self.folds != val_fold)
        return np.flatnonzero(rest), self.indices(val_fold), self.indices(test_fold)


def stratified_kfold(labels, k: int, seed: int = 0) -> DatasetSplit:
    """Shuffle each class, then deal its members round-robin across folds.

    The dealing offset carries over between classes so fold sizes also stay
    within one of each other."""
    labels = np.asarray(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(labels):
        raise DataError(f"k={k} exceeds the number of samples ({len(labels)})")
    rng = np.random.default_rng(seed)
    folds = np.full(len(labels), -1, dtype=np.int64)
    offset = 0
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        folds[members] = (offset + np.arange(len(members))) % k
        offset = (offset + len(members)) % k
    return DatasetSplit(folds, k, seed)


def few_shot_sample(labels, k_per_class: int, seed: int = 0) -> np.ndarray:
    labels = np.asarray(labels)
    if k_per_class < 0:
        raise ValueError("k_per_class must be non-negative")
    rng = np.random.default_rng(seed)
    picked = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < k_per_class:
            raise DataError(
                f"class {cls} has {len(members)} members, fewer than k_per_class={k_per_class}"
            )
        picked.append(rng.choice(members, size=k_per_class, replace=False))
    return np.sort(np.concatenate(picked)) if picked else np.zeros(0, dtype=np.int64)
