"""Tissue segmentation on slide thumbnails and patch-grid extraction."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import DataError


@dataclass(frozen=True)
class Thumbnail:
    """Low-magnification RGB raster of a slide, shape ``(height, width, 3)``."""

    pixels: np.ndarray
    scale: float = 1.25

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise DataError(f"thumbnail must be (H, W, 3), got {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise DataError("thumbnail must be at least 1x1")
        if not self.scale > 0:
            raise DataError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_flat(cls, width: int, height: int, pixels, scale: float = 1.25):
        flat = np.asarray(pixels, dtype=np.uint8)
        if flat.size != width * height * 3:
            raise DataError(
                f"expected {width * height * 3} channel values, got {flat.size}"
            )
        return cls(flat.reshape(height, width, 3), scale)


@dataclass
class TissueMask:
    bits: np.ndarray
    degenerate: bool = False
    threshold: float | None = None

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def area(self) -> int:
        return int(self.bits.sum())


@dataclass
class SegmentationParams:
    median_window: int = 7
    closing_radius: int = 4
    min_area: int = 64
    min_hole_area: int = 64
    # what a uniform non-white thumbnail resolves to: "empty" or "tissue"
    on_uniform: str = "empty"


@dataclass
class PatchGrid:
    coords: np.ndarray  # (n, 2) int64, columns x, y
    tissue_frac: np.ndarray
    patch_px: int = 256
    target_mag: float = 20.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.coords)


def load_thumbnail(path, scale: float = 1.25) -> Thumbnail:
    """Read a PNG or binary PPM (P6) thumbnail."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read thumbnail {path}: {exc}") from exc
    return Thumbnail(rgb, scale)


def background_distance(thumb: Thumbnail) -> np.ndarray:
    """255 - min(R, G, B): zero on white glass, large on stained tissue."""
    return 255 - thumb.pixels.min(axis=2).astype(np.int64)


def segment_tissue(thumb: Thumbnail, params: SegmentationParams | None = None) -> TissueMask:
    params = params or SegmentationParams()
    chan = background_distance(thumb)
    lo, hi = int(chan.min()), int(chan.max())
    if hi == 0:
        return TissueMask(np.zeros(chan.shape, dtype=bool))
    if lo == hi:
        full = params.on_uniform == "tissue"
        return TissueMask(np.full(chan.shape, full, dtype=bool), degenerate=True)

    hist = np.bincount(chan.ravel(), minlength=256).astype(np.float64)
    first, last = kernels.otsu_split(hist, np.arange(256, dtype=np.float64))
    k = (first + last) // 2
    return TissueMask(chan > k, threshold=float(k))


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def remove_small_components(bits: np.ndarray, min_area: int) -> np.ndarray:
    labels, n = ndimage.label(bits, structure=np.ones((3, 3), dtype=bool))
    if n == 0:
        return bits.copy()
    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_area
    keep[0] = False
    return keep[labels]


def fill_small_holes(bits: np.ndarray, min_hole_area: int) -> np.ndarray:
    # holes are 4-connected background regions that do not touch the border
    labels, n = ndimage.label(~bits)
    if n == 0:
        return bits.copy()
    sizes = np.bincount(labels.ravel())
    border = np.unique(
        np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    )
    fill = sizes < min_hole_area
    fill[0] = False
    fill[border] = False
    return bits | fill[labels]


def refine_mask(mask: TissueMask, params: SegmentationParams | None = None) -> TissueMask:
    """Median blur, closing, speck removal and small-hole filling."""
    params = params or SegmentationParams()
    bits = mask.bits.astype(bool)
    if not bits.any():
        return TissueMask(bits.copy(), mask.degenerate, mask.threshold)

    if params.median_window > 1:
        bits = ndimage.median_filter(bits.astype(np.uint8), size=params.median_window, mode="constant", cval=0) > 0
    if params.closing_radius > 0:
        r = params.closing_radius
        # pad so erosion does not eat tissue touching the image border
        padded = np.pad(bits, r, mode="constant")
        closed = ndimage.binary_closing(padded, structure=disk(r))
        bits = closed[r:-r, r:-r]
    bits = remove_small_components(bits, params.min_area)
    bits = fill_small_holes(bits, params.min_hole_area)
    return TissueMask(bits, mask.degenerate, mask.threshold)


def extract_patch_grid(
    mask: TissueMask,
    thumb_mag: float = 1.25,
    target_mag: float = 20.0,
    patch_px: int = 256,
    min_tissue_frac: float = 0.5,
    backend: str | None = None,
) -> PatchGrid:
    """Non-overlapping ``patch_px`` grid at ``target_mag`` keeping windows
    whose thumbnail footprint holds at least ``min_tissue_frac`` tissue."""
    if not thumb_mag > 0 or not target_mag > 0:
        raise DataError("magnifications must be positive")
    s = target_mag / thumb_mag
    if not s > 0:
        raise DataError(f"scale factor must be positive, got {s}")
    if not 0.0 <= min_tissue_frac <= 1.0:
        raise DataError(f"min_tissue_frac must lie in [0, 1], got {min_tissue_frac}")
    patch_px = int(patch_px)

    h, w = mask.bits.shape
    nx = int(math.floor(w * s / patch_px + 1e-9))
    ny = int(math.floor(h * s / patch_px + 1e-9))
    empty = PatchGrid(np.zeros((0, 2), dtype=np.int64), np.zeros(0), patch_px, target_mag)
    if nx == 0 or ny == 0:
        return empty

    gy, gx = np.mgrid[0:ny, 0:nx]
    xs = (gx.ravel() * patch_px).astype(np.int64)
    ys = (gy.ravel() * patch_px).astype(np.int64)
    win = int(math.ceil(patch_px / s - 1e-9))
    mx = np.floor(xs / s + 1e-9).astype(np.int64)
    my = np.floor(ys / s + 1e-9).astype(np.int64)
    frac = kernels.window_fractions(mask.bits, my, mx, win, backend=backend)

    keep = frac >= min_tissue_frac
    coords = np.stack([xs[keep], ys[keep]], axis=1)
    return PatchGrid(coords, frac[keep], patch_px, target_mag, {"scale": s, "window": win})


def sample_patch_subset(
    grid: PatchGrid,
    fraction: float | None = None,
    count: int | None = None,
    seed: int = 0,
) -> PatchGrid:
    """Uniform subset without replacement; output keeps grid order."""
    if (fraction is None) == (count is None):
        raise ValueError("give exactly one of fraction or count")
    n = len(grid)
    if fraction is not None:
        if not 0.0 < fraction <= 1.0:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        k = int(math.floor(fraction * n + 0.5))
    else:
        if count < 0:
            raise ValueError("count must be non-negative")
        k = min(int(count), n)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(n, size=k, replace=False)) if k < n else np.arange(n)
    return PatchGrid(grid.coords[idx], grid.tissue_frac[idx], grid.patch_px, grid.target_mag, dict(grid.meta))


def write_grid_csv(grid: PatchGrid, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "tissue_frac"])
        for (x, y), f in zip(grid.coords.tolist(), grid.tissue_frac.tolist()):
            writer.writerow([x, y, repr(float(f))])


def read_grid_csv(path, patch_px: int = 256, target_mag: float = 20.0) -> PatchGrid:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    coords = np.array([[int(r["x"]), int(r["y"])] for r in rows], dtype=np.int64).reshape(-1, 2)
    frac = np.array([float(r["tissue_frac"]) for r in rows])
    return PatchGrid(coords, frac, patch_px, target_mag)


def tile_thumbnail(
    thumb: Thumbnail,
    target_mag: float = 20.0,
    patch_px: int = 256,
    min_tissue_frac: float = 0.5,
    params: SegmentationParams | None = None,
) -> PatchGrid:
    mask = refine_mask(segment_tissue(thumb, params), params)
    return extract_patch_grid(mask, thumb.scale, target_mag, patch_px, min_tissue_frac)
