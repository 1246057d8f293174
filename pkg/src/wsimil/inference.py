"""Sliding-window slide scoring, heatmaps and flat-image classification."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .cnn import ModelParams, channel_weights, forward, grad_cam_raw, predict_proba
from .errors import EmptySlideError, InputError, SizeError, StateError
from .slide_io import Slide
from .tissue import GridConfig, TileRef, TissueMask, extract_tile, grid_shape, resize_bilinear, tissue_grid, tissue_mask

SCORE_CHUNK = 64


@dataclass
class TileProbGrid:
    """Per-tile probabilities on a stride-spaced grid. Unscored cells hold 0."""

    probs: np.ndarray  # (rows, cols) float64
    scored: np.ndarray  # (rows, cols) bool
    stride: int
    tile_size: int
    magnification: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "x", "y", "prob"])
            for r, c in zip(*np.nonzero(self.scored)):
                w.writerow([r, c, c * self.stride, r * self.stride, repr(float(self.probs[r, c]))])


@dataclass
class Heatmap:
    values: np.ndarray  # (H, W) float in [0, 1]
    provenance: str  # "probability" | "gradcam"
    stride: int
    tile_size: int
    magnification: float

    def write(self, path) -> tuple[Path, Path]:
        """8-bit PGM (P5) plus a sidecar ``.json`` with the grid geometry."""
        path = Path(path)
        h, w = self.values.shape
        data = np.clip(np.floor(self.values * 255.0 + 0.5), 0, 255).astype(np.uint8)
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(data.tobytes())
        meta = path.with_suffix(".json")
        meta.write_text(
            json.dumps(
                {
                    "stride": self.stride,
                    "tile_size": self.tile_size,
                    "magnification": self.magnification,
                    "provenance": self.provenance,
                    "width": w,
                    "height": h,
                },
                indent=1,
            )
        )
        return path, meta


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def dense_refs(slide_id: str, width: int, height: int, cfg: GridConfig) -> list[TileRef]:
    rows, cols = grid_shape(width, height, cfg.tile_size, cfg.stride)
    return [
        TileRef(slide_id, cfg.magnification, y=r * cfg.stride, x=c * cfg.stride, size=cfg.tile_size)
        for r in range(rows)
        for c in range(cols)
    ]


def score_refs(params: ModelParams, slide: Slide, refs: list[TileRef], chunk: int = SCORE_CHUNK) -> np.ndarray:
    """Un-augmented probabilities for ``refs`` in order; tiles are read chunk by chunk."""
    out = np.zeros(len(refs), dtype=np.float64)
    for i in range(0, len(refs), chunk):
        part = refs[i : i + chunk]
        tiles = np.stack([extract_tile(slide, r) for r in part])
        out[i : i + len(part)] = predict_proba(params, tiles, chunk=chunk)
    return out


def predict_slide(
    params: ModelParams,
    slide: Slide,
    tile_size: int = 224,
    stride: int = 112,
    magnification: float = 10.0,
    mask: TissueMask | None = None,
) -> tuple[float, TileProbGrid]:
    """Max-pooled slide probability over all tissue-overlapping grid tiles."""
    cfg = GridConfig(tile_size, stride, magnification)
    mask = tissue_mask(slide) if mask is None else mask
    keep = tissue_grid(slide, cfg, mask)
    rows, cols = keep.shape
    rs, cs = np.nonzero(keep)
    if len(rs) == 0:
        raise EmptySlideError(f"slide {slide.id} has no tissue tiles at x{magnification:g}")
    refs = [TileRef(slide.id, magnification, y=int(r) * stride, x=int(c) * stride, size=tile_size) for r, c in zip(rs, cs)]
    scores = score_refs(params, slide, refs)
    probs = np.zeros((rows, cols), dtype=np.float64)
    probs[rs, cs] = scores
    grid = TileProbGrid(probs, keep, stride, tile_size, magnification)
    return float(scores.max()), grid


def predict_slides(params: ModelParams, slides: list[Slide], cfg: GridConfig, threads: int = 1) -> list[float]:
    """Slide probabilities in input order; slides are fanned out over ``threads`` workers."""

    def one(s: Slide) -> float:
        return predict_slide(params, s, cfg.tile_size, cfg.stride, cfg.magnification)[0]

    if threads <= 1 or len(slides) <= 1:
        return [one(s) for s in slides]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, slides))


def probability_heatmap(grid: TileProbGrid) -> Heatmap:
    """Each tile's probability painted as a stride x stride block."""
    rows, cols = grid.probs.shape
    if rows == 0 or cols == 0:
        raise InputError("empty probability grid")
    s = grid.stride
    values = np.kron(grid.probs, np.ones((s, s)))
    return Heatmap(values, "probability", grid.stride, grid.tile_size, grid.magnification)


def grad_cam_tile(params: ModelParams, tile: np.ndarray | None = None, cache=None, normalize: bool = True) -> np.ndarray:
    """Grad-CAM map at the final conv resolution for one tile.

    Pass either the tile or the ``ForwardCache`` of a forward pass over it.
    """
    if cache is not None:
        if cache.features is None:
            raise StateError("forward cache lacks final conv activations")
        feats = cache.features[:1]
        cam = np.maximum(np.einsum("bhwc,bc->bhw", feats, channel_weights(params, feats)), 0.0)[0]
    elif tile is not None:
        cam = grad_cam_raw(params, np.asarray(tile)[None])[0]
    else:
        raise StateError("grad_cam_tile needs a tile or a forward cache")
    cam = cam.astype(np.float64)
    if normalize:
        peak = cam.max()
        if peak > 0:
            cam = cam / peak
    return cam


def _upscale(cam: np.ndarray, size: int) -> np.ndarray:
    img = Image.fromarray(cam.astype(np.float32), mode="F")
    return np.asarray(img.resize((size, size), Image.Resampling.BILINEAR), dtype=np.float64)


def grad_cam_heatmap(
    params: ModelParams,
    slide: Slide,
    stride: int = 32,
    tile_size: int | None = None,
    magnification: float = 10.0,
    return_coverage: bool = False,
):
    """Overlap-averaged Grad-CAM over a dense grid, normalised by the slide maximum."""
    tile_size = params.arch.input_size if tile_size is None else tile_size
    cfg = GridConfig(tile_size, stride, magnification)
    width, height = slide.dimensions_at(magnification)
    refs = dense_refs(slide.id, width, height, cfg)
    acc = np.zeros((height, width), dtype=np.float64)
    cover = np.zeros((height, width), dtype=np.int64)
    for i in range(0, len(refs), SCORE_CHUNK):
        part = refs[i : i + SCORE_CHUNK]
        tiles = np.stack([extract_tile(slide, r) for r in part])
        cams = grad_cam_raw(params, tiles)
        for ref, cam in zip(part, cams):
            acc[ref.y : ref.y + tile_size, ref.x : ref.x + tile_size] += _upscale(cam, tile_size)
            cover[ref.y : ref.y + tile_size, ref.x : ref.x + tile_size] += 1
    values = np.divide(acc, cover, out=np.zeros_like(acc), where=cover > 0)
    values = np.maximum(values, 0.0)
    peak = values.max()
    if peak > 0:
        values /= peak
    hm = Heatmap(values, "gradcam", stride, tile_size, magnification)
    return (hm, cover) if return_coverage else hm


def rescale_image(image: np.ndarray, source_mag: float, target_mag: float) -> np.ndarray:
    img = np.asarray(image, dtype=np.uint8)
    if math.isclose(source_mag, target_mag):
        return img
    f = target_mag / source_mag
    h, w = img.shape[:2]
    return resize_bilinear(img, max(1, int(round(w * f))), max(1, int(round(h * f))))


def image_grid_probs(params: ModelParams, image: np.ndarray, tile_size: int, stride: int) -> np.ndarray:
    """(rows, cols) probabilities of a dense grid over an in-memory uint8 image."""
    h, w = image.shape[:2]
    rows, cols = grid_shape(w, h, tile_size, stride)
    if rows == 0 or cols == 0:
        raise SizeError(f"image {w}x{h} smaller than one {tile_size}px tile")
    tiles = np.stack(
        [image[r * stride : r * stride + tile_size, c * stride : c * stride + tile_size] for r in range(rows) for c in range(cols)]
    ).astype(np.float32) / np.float32(255.0)
    return predict_proba(params, tiles, chunk=SCORE_CHUNK).reshape(rows, cols)


def classify_flat_image(
    params: ModelParams,
    image: np.ndarray,
    source_mag: float,
    target_mag: float,
    tile_size: int | None = None,
    stride: int | None = None,
) -> float:
    """Classify a single crop: rescale to the model's magnification, grid densely, max-pool."""
    tile_size = params.arch.input_size if tile_size is None else tile_size
    stride = tile_size // 2 if stride is None else stride
    scaled = rescale_image(image, source_mag, target_mag)
    return float(image_grid_probs(params, scaled, tile_size, stride).max())


def forward_single(params: ModelParams, tile: np.ndarray):
    """Forward pass over one tile keeping the cache (for Grad-CAM)."""
    return forward(params, np.asarray(tile)[None], keep_cache=True)
