"""Procedural slides with known positive regions.

Background is near-white glass. Tissue blobs are pink, low-frequency textured
regions sprinkled with small dark nuclei and a few pale vacuoles. Positive
slides additionally carry clusters of "ring" cells: a dark annulus around a
pale mucin-filled center with a dark nucleus pushed against the wall. Ring
cells never appear on negative slides, so a slide is positive iff it contains
the motif anywhere.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage, signal

from .errors import ConfigError, InputError
from .slide_io import ANNOTATION_FILE, AnnotationSet, Slide, make_annotations, write_annotations, write_slide

# palette (RGB, uint8)
BACKGROUND = (243, 242, 245)
BACKGROUND_NOISE = 3
TISSUE = (214, 150, 190)
TISSUE_NOISE = 14.0
NUCLEUS = (92, 58, 138)
VACUOLE = (236, 222, 232)
RING_WALL = (104, 44, 118)
RING_MUCIN = (226, 224, 240)
RING_NUCLEUS = (52, 22, 84)

# geometry (level-0 pixels)
NUCLEUS_RADIUS = (1.6, 3.2)
NUCLEUS_DENSITY = 1 / 260.0  # per tissue pixel
VACUOLE_RADIUS = (3.0, 6.0)
VACUOLE_DENSITY = 1 / 6000.0
RING_RADIUS = (8.0, 11.0)
RING_WALL_WIDTH = 2.6
RING_NUCLEUS_RADIUS = 3.4
CLUSTER_RADIUS = (40.0, 64.0)
POLYGON_SIDES = 20
POLYGON_MARGIN = 3.0


@dataclass(frozen=True)
class SynthSpec:
    seed: int
    width: int = 1024
    height: int = 1024
    label: int = 0
    n_tissue_blobs: int = 3
    n_positive_clusters: int = 0
    motif_density: int = 14

    def validate(self) -> None:
        if self.label not in (0, 1):
            raise ConfigError(f"label must be 0 or 1, got {self.label}")
        if self.label == 1 and self.n_positive_clusters < 1:
            raise ConfigError("label=1 requires n_positive_clusters >= 1")
        if self.label == 0 and self.n_positive_clusters != 0:
            raise ConfigError("label=0 requires n_positive_clusters == 0")
        if self.width < 64 or self.height < 64:
            raise ConfigError("synthetic slides must be at least 64x64")
        if self.n_tissue_blobs < 1:
            raise ConfigError("n_tissue_blobs must be >= 1")
        if self.motif_density < 1 and self.label == 1:
            raise ConfigError("motif_density must be >= 1")


@dataclass
class SynthTruth:
    """Ground-truth rasters that accompany a rendered slide."""

    image: np.ndarray
    tissue: np.ndarray
    motif: np.ndarray
    polygons: list


def _disk_stamp(canvas: np.ndarray, cx: float, cy: float, r: float, colour, mask: np.ndarray | None = None) -> None:
    h, w = canvas.shape[:2]
    x0, x1 = max(0, int(cx - r - 1)), min(w, int(cx + r + 2))
    y0, y1 = max(0, int(cy - r - 1)), min(h, int(cy + r + 2))
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    canvas[y0:y1, x0:x1][inside] = colour
    if mask is not None:
        mask[y0:y1, x0:x1] |= inside


def _ring_cell(canvas: np.ndarray, motif: np.ndarray, cx: float, cy: float, r: float, theta: float) -> None:
    _disk_stamp(canvas, cx, cy, r, RING_WALL, motif)
    _disk_stamp(canvas, cx, cy, r - RING_WALL_WIDTH, RING_MUCIN)
    off = r - RING_WALL_WIDTH - RING_NUCLEUS_RADIUS * 0.55
    _disk_stamp(canvas, cx + off * math.cos(theta), cy + off * math.sin(theta), RING_NUCLEUS_RADIUS, RING_NUCLEUS)


def _blob_mask(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    cx = rng.uniform(0.2, 0.8) * w
    cy = rng.uniform(0.2, 0.8) * h
    scale = min(w, h)
    ra = rng.uniform(0.12, 0.26) * scale
    rb = rng.uniform(0.12, 0.26) * scale
    rot = rng.uniform(0, math.pi)
    harm = rng.uniform(-0.12, 0.12, size=(3, 2))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(rot) + dy * math.sin(rot)
    v = -dx * math.sin(rot) + dy * math.cos(rot)
    ang = np.arctan2(v, u)
    wobble = 1.0 + sum(a * np.cos((k + 2) * ang) + b * np.sin((k + 2) * ang) for k, (a, b) in enumerate(harm))
    return (u / ra) ** 2 + (v / rb) ** 2 <= wobble**2


def _scatter(rng, region: np.ndarray, density: float) -> np.ndarray:
    ys, xs = np.nonzero(region)
    n = rng.poisson(density * len(xs)) if len(xs) else 0
    if n == 0:
        return np.empty((0, 2))
    idx = rng.integers(0, len(xs), size=n)
    return np.stack([xs[idx], ys[idx]], axis=1).astype(np.float64) + rng.uniform(-0.5, 0.5, size=(n, 2))


def render_synthetic(spec: SynthSpec) -> SynthTruth:
    """Render level-0 pixels and ground truth for ``spec`` (deterministic in seed)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, h = spec.width, spec.height

    tissue = np.zeros((h, w), dtype=bool)
    for _ in range(spec.n_tissue_blobs):
        tissue |= _blob_mask(rng, w, h)

    # clusters: pick centres on tissue, far enough from the border for the polygon
    clusters = []
    max_cell = RING_RADIUS[1]
    for _ in range(spec.n_positive_clusters):
        cr = rng.uniform(*CLUSTER_RADIUS)
        pr = (cr + max_cell + POLYGON_MARGIN) / math.cos(math.pi / POLYGON_SIDES)
        margin = int(math.ceil(pr)) + 1
        if 2 * margin >= min(w, h):
            raise ConfigError(f"slide {w}x{h} too small for a positive cluster")
        interior = np.zeros_like(tissue)
        interior[margin : h - margin, margin : w - margin] = tissue[margin : h - margin, margin : w - margin]
        ys, xs = np.nonzero(interior)
        if len(xs):
            i = rng.integers(len(xs))
            cx, cy = float(xs[i]), float(ys[i])
        else:
            cx, cy = rng.uniform(margin, w - margin), rng.uniform(margin, h - margin)
        clusters.append((cx, cy, cr, pr))
        yy, xx = np.ogrid[0:h, 0:w]
        tissue |= (xx - cx) ** 2 + (yy - cy) ** 2 <= (cr + max_cell + 1) ** 2

    image = np.empty((h, w, 3), dtype=np.float64)
    image[:] = BACKGROUND
    image += rng.integers(-BACKGROUND_NOISE, BACKGROUND_NOISE + 1, size=(h, w, 1))

    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=10.0, mode="reflect")
    noise *= TISSUE_NOISE / (noise.std() + 1e-12)
    fine = rng.normal(0.0, 4.0, size=(h, w))
    shade = np.clip(noise + fine, -3 * TISSUE_NOISE, 3 * TISSUE_NOISE)
    pink = np.asarray(TISSUE, dtype=np.float64)[None, None, :] + shade[..., None] * np.array([0.6, 1.0, 0.8])
    image[tissue] = pink[tissue]
    canvas = np.clip(np.rint(image), 0, 255).astype(np.uint8)

    for x, y in _scatter(rng, tissue, VACUOLE_DENSITY):
        _disk_stamp(canvas, x, y, rng.uniform(*VACUOLE_RADIUS), VACUOLE)
    for x, y in _scatter(rng, tissue, NUCLEUS_DENSITY):
        _disk_stamp(canvas, x, y, rng.uniform(*NUCLEUS_RADIUS), NUCLEUS)

    motif = np.zeros((h, w), dtype=bool)
    polygons = []
    for cx, cy, cr, pr in clusters:
        placed: list[tuple[float, float, float]] = []
        attempts = 0
        while len(placed) < spec.motif_density and attempts < 50 * spec.motif_density:
            attempts += 1
            r = rng.uniform(*RING_RADIUS)
            rho = cr * math.sqrt(rng.uniform())
            phi = rng.uniform(0, 2 * math.pi)
            x, y = cx + rho * math.cos(phi), cy + rho * math.sin(phi)
            if all((x - a) ** 2 + (y - b) ** 2 >= (0.9 * (r + c)) ** 2 for a, b, c in placed):
                placed.append((x, y, r))
        for x, y, r in placed:
            _ring_cell(canvas, motif, x, y, r, rng.uniform(0, 2 * math.pi))
        angles = 2 * math.pi * np.arange(POLYGON_SIDES) / POLYGON_SIDES
        poly = np.stack([cx + pr * np.cos(angles), cy + pr * np.sin(angles)], axis=1)
        polygons.append(np.round(poly, 2))
    return SynthTruth(canvas, tissue, motif, polygons)


def generate_synthetic_slide(
    spec: SynthSpec,
    directory: str | os.PathLike,
    slide_id: str | None = None,
    base_magnification: float = 20.0,
    n_levels: int = 4,
) -> tuple[Slide, AnnotationSet]:
    """Render ``spec`` and write it as a slide container (plus annotations.json)."""
    truth = render_synthetic(spec)
    sid = slide_id if slide_id is not None else Path(directory).name
    slide = write_slide(directory, sid, truth.image, base_magnification, n_levels, label=spec.label)
    ann = make_annotations(sid, truth.polygons, slide.dimensions)
    write_annotations(Path(directory) / ANNOTATION_FILE, ann)
    return slide, ann


# -- separability check ------------------------------------------------------


def ring_template(radius: float, nucleus_angle: float) -> np.ndarray:
    """Luminance template of one ring cell, nucleus at ``nucleus_angle`` radians."""
    size = int(math.ceil(radius + 4)) * 2 + 1
    c = size // 2
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    t = np.full((size, size), _lum(TISSUE))
    d = np.hypot(xx - c, yy - c)
    t[d <= radius] = _lum(RING_WALL)
    t[d <= radius - RING_WALL_WIDTH] = _lum(RING_MUCIN)
    off = radius - RING_WALL_WIDTH - RING_NUCLEUS_RADIUS * 0.55
    nx, ny = c + off * math.cos(nucleus_angle), c + off * math.sin(nucleus_angle)
    t[np.hypot(xx - nx, yy - ny) <= RING_NUCLEUS_RADIUS] = _lum(RING_NUCLEUS)
    return t


def _lum(rgb) -> float:
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


DETECTOR_RADII = (8.5, 9.5, 10.5)
DETECTOR_ANGLES = 8


def motif_detector_score(image: np.ndarray) -> float:
    """Max normalised cross-correlation of luminance against a bank of ring templates.

    The bank covers the generator's radius range and eight nucleus
    orientations. Slides with ring cells score well above slides without.
    """
    lum = image.astype(np.float64) @ np.array([0.299, 0.587, 0.114])
    best = -1.0
    for radius in DETECTOR_RADII:
        for k in range(DETECTOR_ANGLES):
            t = ring_template(radius, 2 * math.pi * k / DETECTOR_ANGLES)
            t = t - t.mean()
            t /= np.linalg.norm(t)
            box = np.ones_like(t)
            num = signal.fftconvolve(lum, t[::-1, ::-1], mode="valid")
            s1 = signal.fftconvolve(lum, box, mode="valid")
            s2 = signal.fftconvolve(lum * lum, box, mode="valid")
            var = np.maximum(s2 - s1 * s1 / t.size, 1e-6)
            best = max(best, float((num / np.sqrt(var)).max()))
    return best


# -- pretext textures --------------------------------------------------------

TEXTURE_CLASSES = ("rings", "nuclei", "stripes", "plain")


def _random_palette(rng):
    base = rng.uniform(150, 235, size=3)
    dark = rng.uniform(30, 120, size=3)
    pale = np.clip(base + rng.uniform(10, 40), 0, 255)
    return base, dark, pale


def render_texture(kind: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """One ``size``x``size`` uint8 texture patch of the given class."""
    base, dark, pale = _random_palette(rng)
    smooth = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=size / 10, mode="wrap")
    smooth *= rng.uniform(4, 14) / (smooth.std() + 1e-12)
    img = np.clip(base[None, None, :] + smooth[..., None], 0, 255).astype(np.uint8)
    area = size * size
    if kind == "rings":
        for _ in range(max(2, int(rng.poisson(area / 500)))):
            r = rng.uniform(3.5, 7.0)
            x, y = rng.uniform(0, size, 2)
            _disk_stamp(img, x, y, r, dark)
            _disk_stamp(img, x, y, r - max(1.2, r * 0.3), pale)
            th = rng.uniform(0, 2 * math.pi)
            off = r * 0.45
            _disk_stamp(img, x + off * math.cos(th), y + off * math.sin(th), r * 0.3, dark)
    elif kind == "nuclei":
        for _ in range(int(rng.poisson(area / 60))):
            x, y = rng.uniform(0, size, 2)
            _disk_stamp(img, x, y, rng.uniform(1.0, 2.6), dark)
    elif kind == "stripes":
        period = rng.uniform(5, 12)
        ang = rng.uniform(0, math.pi)
        yy, xx = np.mgrid[0:size, 0:size]
        wave = np.sin(2 * math.pi * (xx * math.cos(ang) + yy * math.sin(ang)) / period + rng.uniform(0, 6.3))
        mix = ((wave + 1) / 2)[..., None]
        img = np.clip(img * (1 - 0.6 * mix) + dark * 0.6 * mix, 0, 255).astype(np.uint8)
    elif kind == "plain":
        for _ in range(int(rng.poisson(area / 700))):
            x, y = rng.uniform(0, size, 2)
            _disk_stamp(img, x, y, rng.uniform(2.0, 5.0), pale)
    else:
        raise InputError(f"unknown texture class {kind!r}")
    return img


def generate_texture_corpus(n_per_class: int, size: int, rng: np.random.Generator, classes=TEXTURE_CLASSES):
    """Return (images[N,size,size,3] float in [0,1], labels[N]) over ``classes``."""
    images, labels = [], []
    for _ in range(n_per_class):
        for c, kind in enumerate(classes):
            images.append(render_texture(kind, size, rng))
            labels.append(c)
    x = np.stack(images).astype(np.float32) / 255.0
    return x, np.asarray(labels, dtype=np.int64)
