"""Tissue detection, tile grids, tile extraction and augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image

from .errors import BoundsError, ConfigError, DegenerateError, InputError
from .slide_io import AnnotationSet, Slide, point_in_polygons, read_level, read_region

# integer luminance weights (x1000) so rounding is exact
_LUM_W = np.array([299, 587, 114], dtype=np.int64)


@dataclass(frozen=True)
class GridConfig:
    tile_size: int = 224
    stride: int = 112
    magnification: float = 10.0

    def __post_init__(self):
        if self.tile_size <= 0:
            raise ConfigError(f"tile_size must be > 0, got {self.tile_size}")
        if not 0 < self.stride <= self.tile_size:
            raise ConfigError(f"stride must be in (0, tile_size], got {self.stride}")
        if not self.magnification > 0:
            raise ConfigError(f"magnification must be > 0, got {self.magnification}")


@dataclass(frozen=True, order=True)
class TileRef:
    """Square tile; ``x``/``y`` are the top-left corner at ``magnification``."""

    slide_id: str
    magnification: float
    y: int
    x: int
    size: int


@dataclass(frozen=True)
class TissueMask:
    mask: np.ndarray
    level: int
    downsample: float  # level-0 pixels per mask pixel
    threshold: int

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def luminance(image: np.ndarray) -> np.ndarray:
    """round(0.299R + 0.587G + 0.114B), half-up, as uint8."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise InputError(f"expected HxWx3 RGB image, got shape {img.shape}")
    return ((img.astype(np.int64) @ _LUM_W + 500) // 1000).astype(np.uint8)


def luminance_histogram(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.size == 0:
        raise InputError("empty image")
    return np.bincount(luminance(img).ravel(), minlength=256).astype(np.int64)


def otsu_threshold(hist: np.ndarray) -> int:
    """Split t maximising between-class variance of [0..t] vs [t+1..255].

    Ties resolve to the smallest t. Scores are compared as exact rationals:
    w0*w1*(mu0-mu1)^2 is proportional to (S0*N1 - S1*N0)^2 / (N0*N1).
    """
    counts = [int(c) for c in np.asarray(hist).ravel()]
    if len(counts) != 256 or any(c < 0 for c in counts):
        raise InputError("histogram must hold 256 non-negative counts")
    if sum(1 for c in counts if c) < 2:
        raise DegenerateError("histogram has fewer than two non-empty bins")
    n_total = sum(counts)
    s_total = sum(i * c for i, c in enumerate(counts))
    best_t, best_num, best_den = 0, 0, 1
    n0 = s0 = 0
    for t in range(255):
        n0 += counts[t]
        s0 += t * counts[t]
        n1 = n_total - n0
        if n0 == 0 or n1 == 0:
            continue
        s1 = s_total - s0
        num = (s0 * n1 - s1 * n0) ** 2
        den = n0 * n1
        if num * best_den > best_num * den:
            best_t, best_num, best_den = t, num, den
    return best_t


def tissue_mask(slide: Slide, work_level: int | None = None) -> TissueMask:
    """Otsu tissue mask at ``work_level`` (default: lowest-resolution level).

    A pixel is tissue when its luminance falls in the lower Otsu class.
    """
    level = len(slide.levels) - 1 if work_level is None else work_level
    img = read_level(slide, level)
    t = otsu_threshold(luminance_histogram(img))
    return TissueMask(luminance(img) <= t, level, slide.downsample(level), t)


def grid_shape(width: int, height: int, tile_size: int, stride: int) -> tuple[int, int]:
    """(rows, cols) of stride-aligned tiles that fit entirely inside width x height."""
    rows = (height - tile_size) // stride + 1 if height >= tile_size else 0
    cols = (width - tile_size) // stride + 1 if width >= tile_size else 0
    return rows, cols


def _footprint_span(start: int, size: int, scale: float, downsample: float, limit: int) -> tuple[int, int]:
    lo = math.floor(start * scale / downsample)
    hi = math.ceil((start + size) * scale / downsample)
    return max(0, lo), min(limit, max(hi, lo + 1))


def tissue_grid(slide: Slide, cfg: GridConfig, mask: TissueMask) -> np.ndarray:
    """Boolean (rows, cols) array: does tile (r, c) overlap at least one tissue pixel."""
    width, height = slide.dimensions_at(cfg.magnification)
    rows, cols = grid_shape(width, height, cfg.tile_size, cfg.stride)
    out = np.zeros((rows, cols), dtype=bool)
    if rows == 0 or cols == 0:
        return out
    m = mask.mask
    integral = np.zeros((m.shape[0] + 1, m.shape[1] + 1), dtype=np.int64)
    integral[1:, 1:] = m.cumsum(0).cumsum(1)
    scale = slide.base_magnification / cfg.magnification
    ys = [_footprint_span(r * cfg.stride, cfg.tile_size, scale, mask.downsample, m.shape[0]) for r in range(rows)]
    xs = [_footprint_span(c * cfg.stride, cfg.tile_size, scale, mask.downsample, m.shape[1]) for c in range(cols)]
    y0 = np.array([a for a, _ in ys])[:, None]
    y1 = np.array([b for _, b in ys])[:, None]
    x0 = np.array([a for a, _ in xs])[None, :]
    x1 = np.array([b for _, b in xs])[None, :]
    total = integral[y1, x1] - integral[y0, x1] - integral[y1, x0] + integral[y0, x0]
    return total > 0


def tile_centres_in(polygons, refs: list[TileRef], scale: float) -> np.ndarray:
    """Which tiles have their centre inside some polygon (polygons given in level-0
    pixels and scaled by 1/``scale`` into tile coordinates)."""
    if not refs:
        return np.zeros(0, dtype=bool)
    cx = np.array([r.x + r.size / 2 for r in refs], dtype=np.float64)
    cy = np.array([r.y + r.size / 2 for r in refs], dtype=np.float64)
    scaled = [np.asarray(p, dtype=np.float64) / scale for p in polygons]
    return point_in_polygons(cx, cy, scaled)


def grid_locations(
    slide: Slide,
    cfg: GridConfig,
    mask: TissueMask,
    restrict: AnnotationSet | None = None,
) -> list[TileRef]:
    """Row-major tiles overlapping tissue, optionally limited to annotated regions."""
    keep = tissue_grid(slide, cfg, mask)
    rs, cs = np.nonzero(keep)
    refs = [
        TileRef(slide.id, cfg.magnification, y=int(r) * cfg.stride, x=int(c) * cfg.stride, size=cfg.tile_size)
        for r, c in zip(rs, cs)
    ]
    if restrict is not None:
        scale = slide.base_magnification / cfg.magnification
        inside = tile_centres_in(restrict.polygons, refs, scale)
        refs = [ref for ref, ok in zip(refs, inside) if ok]
    return refs


def _check_ref(slide: Slide, ref: TileRef) -> None:
    width, height = slide.dimensions_at(ref.magnification)
    if ref.x < 0 or ref.y < 0 or ref.x + ref.size > width or ref.y + ref.size > height:
        raise BoundsError(f"tile {ref} outside slide ({width}x{height} at x{ref.magnification:g})")


def read_tile_rgb(slide: Slide, ref: TileRef) -> np.ndarray:
    """uint8 pixels of ``ref``; bilinear resampling when no pyramid level matches."""
    _check_ref(slide, ref)
    level = slide.exact_level(ref.magnification)
    if level is not None:
        return read_region(slide, level, ref.x, ref.y, ref.size, ref.size)
    level = slide.source_level(ref.magnification)
    f = slide.levels[level].magnification / ref.magnification
    lw, lh = slide.level_dimensions(level)
    bx0, by0 = ref.x * f, ref.y * f
    bx1, by1 = (ref.x + ref.size) * f, (ref.y + ref.size) * f
    rx0, ry0 = max(0, math.floor(bx0) - 1), max(0, math.floor(by0) - 1)
    rx1, ry1 = min(lw, math.ceil(bx1) + 1), min(lh, math.ceil(by1) + 1)
    region = read_region(slide, level, rx0, ry0, rx1 - rx0, ry1 - ry0)
    img = Image.fromarray(region).resize(
        (ref.size, ref.size), Image.Resampling.BILINEAR, box=(bx0 - rx0, by0 - ry0, bx1 - rx0, by1 - ry0)
    )
    return np.asarray(img)


def extract_tile(slide: Slide, ref: TileRef) -> np.ndarray:
    """Tile as float32 (size, size, 3) in [0, 1]."""
    return read_tile_rgb(slide, ref).astype(np.float32) / np.float32(255.0)


def resize_bilinear(image: np.ndarray, width: int, height: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.uint8)
    if (img.shape[1], img.shape[0]) == (width, height):
        return img.copy()
    return np.asarray(Image.fromarray(img).resize((width, height), Image.Resampling.BILINEAR))


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0
    colour_shift: tuple[float, float, float] | None = None


def sample_augmentation(rng: np.random.Generator, colour_shift: float = 0.05) -> AugmentParams:
    """Each op is on with probability 1/2. A fixed number of draws per call."""
    coins = rng.random(4) < 0.5
    k = int(rng.integers(0, 4))
    shift = rng.uniform(-colour_shift, colour_shift, size=3)
    return AugmentParams(
        hflip=bool(coins[0]),
        vflip=bool(coins[1]),
        rot90=k if coins[2] else 0,
        colour_shift=tuple(float(s) for s in shift) if coins[3] else None,
    )


def apply_augmentation(tile: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = tile
    if params.hflip:
        out = out[:, ::-1]
    if params.vflip:
        out = out[::-1]
    if params.rot90:
        out = np.rot90(out, params.rot90, axes=(0, 1))
    if params.colour_shift is not None:
        out = np.clip(out + np.asarray(params.colour_shift, dtype=tile.dtype), 0.0, 1.0)
    return np.ascontiguousarray(out, dtype=tile.dtype)


def augment(tile: np.ndarray, rng: np.random.Generator, colour_shift: float = 0.05) -> np.ndarray:
    return apply_augmentation(tile, sample_augmentation(rng, colour_shift))


def jitter_ref(slide: Slide, ref: TileRef, max_shift: int, rng: np.random.Generator) -> TileRef:
    """Translate ``ref`` uniformly by up to ``max_shift`` px per axis, clamped in bounds."""
    dx, dy = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    width, height = slide.dimensions_at(ref.magnification)
    x = min(max(ref.x + dx, 0), width - ref.size)
    y = min(max(ref.y + dy, 0), height - ref.size)
    return replace(ref, x=x, y=y)
