"""Slide container format, lazy region reads and annotation files.

A slide is a directory::

    slide.json      {"id", "label", "levels": [{"width", "height", "magnification", "file"}]}
    level_0.ppm     binary P6 raster, maxval 255
    level_1.ppm     ...

Levels form a strict halving pyramid: level n+1 is the 2x2 box mean of level n
(round half up), and its magnification is half that of level n.
"""

from __future__ import annotations

import json
import math
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BoundsError, ConsistencyError, FormatError

SLIDE_META = "slide.json"
ANNOTATION_FILE = "annotations.json"


@dataclass(frozen=True)
class LevelMeta:
    width: int
    height: int
    magnification: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise FormatError(f"level dimensions must be >= 1, got {self.width}x{self.height}")
        if not self.magnification > 0:
            raise FormatError(f"magnification must be > 0, got {self.magnification}")


@dataclass(frozen=True)
class AnnotationSet:
    """Positive-region polygons in level-0 pixel coordinates.

    Polygons are stored open (last vertex != first); closure is implicit.
    """

    slide_id: str
    polygons: tuple[np.ndarray, ...] = ()

    def __len__(self) -> int:
        return len(self.polygons)


@dataclass(eq=False)
class Slide:
    """Handle on an on-disk pyramid. Pixel data is only touched by ``read_region``."""

    id: str
    label: int | None
    levels: tuple[LevelMeta, ...]
    path: Path
    files: tuple[str, ...]
    offsets: tuple[int, ...]
    _maps: dict = field(default_factory=dict, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def base_magnification(self) -> float:
        return self.levels[0].magnification

    @property
    def dimensions(self) -> tuple[int, int]:
        return self.levels[0].width, self.levels[0].height

    def level_dimensions(self, level: int) -> tuple[int, int]:
        lv = self.levels[level]
        return lv.width, lv.height

    def downsample(self, level: int) -> float:
        return float(2**level)

    def dimensions_at(self, magnification: float) -> tuple[int, int]:
        """Pixel size of the slide at an arbitrary magnification (floored)."""
        scale = magnification / self.base_magnification
        w0, h0 = self.dimensions
        exact = self.exact_level(magnification)
        if exact is not None:
            return self.level_dimensions(exact)
        return max(1, int(math.floor(w0 * scale))), max(1, int(math.floor(h0 * scale)))

    def exact_level(self, magnification: float) -> int | None:
        for i, lv in enumerate(self.levels):
            if math.isclose(lv.magnification, magnification, rel_tol=1e-9):
                return i
        return None

    def source_level(self, magnification: float) -> int:
        """Level to read from for ``magnification``: exact match, else the
        lowest-resolution level that still has at least that magnification."""
        exact = self.exact_level(magnification)
        if exact is not None:
            return exact
        best = 0
        for i, lv in enumerate(self.levels):
            if lv.magnification >= magnification:
                best = i
        return best

    def _raster(self, level: int) -> np.ndarray:
        arr = self._maps.get(level)
        if arr is None:
            with self._lock:
                arr = self._maps.get(level)
                if arr is None:
                    lv = self.levels[level]
                    arr = np.memmap(
                        self.path / self.files[level],
                        dtype=np.uint8,
                        mode="r",
                        offset=self.offsets[level],
                        shape=(lv.height, lv.width, 3),
                    )
                    self._maps[level] = arr
        return arr

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        return read_region(self, level, x, y, w, h)


# -- PPM ---------------------------------------------------------------------


def _ppm_header(fh) -> tuple[int, int, int, int]:
    """Parse a P6 header; returns (width, height, maxval, data_offset)."""
    head = fh.read(512)
    tokens: list[bytes] = []
    i = 0
    n = len(head)
    while len(tokens) < 4:
        while i < n and head[i : i + 1].isspace():
            i += 1
        if i >= n:
            raise FormatError("truncated PPM header")
        if head[i : i + 1] == b"#":
            while i < n and head[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not head[j : j + 1].isspace():
            j += 1
        tokens.append(head[i:j])
        i = j
    # exactly one whitespace byte separates maxval from the raster
    offset = i + 1
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise FormatError("non-integer PPM header field") from exc
    if maxval != 255:
        raise FormatError(f"unsupported PPM maxval {maxval}")
    return w, h, maxval, offset


def read_ppm_header(path: str | os.PathLike) -> tuple[int, int, int]:
    """Return (width, height, data_offset) and check the payload length."""
    with open(path, "rb") as fh:
        w, h, _, offset = _ppm_header(fh)
    size = os.path.getsize(path)
    if size - offset != w * h * 3:
        raise ConsistencyError(f"{path}: payload holds {size - offset} bytes, header implies {w * h * 3}")
    return w, h, offset


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"expected HxWx3 image, got shape {image.shape}")
    h, w, _ = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    w, h, offset = read_ppm_header(path)
    with open(path, "rb") as fh:
        fh.seek(offset)
        data = fh.read(w * h * 3)
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


# -- pyramid -----------------------------------------------------------------


def box_downsample(image: np.ndarray) -> np.ndarray:
    """2x2 box mean with round-half-up; odd edges average the pixels present."""
    img = np.asarray(image)
    h, w = img.shape[:2]
    oh, ow = (h + 1) // 2, (w + 1) // 2
    pad_h, pad_w = oh * 2 - h, ow * 2 - w
    src = img.astype(np.int64)
    cnt = np.ones((h, w), dtype=np.int64)
    if pad_h or pad_w:
        widths = ((0, pad_h), (0, pad_w)) + ((0, 0),) * (img.ndim - 2)
        src = np.pad(src, widths)
        cnt = np.pad(cnt, ((0, pad_h), (0, pad_w)))
    s = src.reshape(oh, 2, ow, 2, *img.shape[2:]).sum(axis=(1, 3))
    n = cnt.reshape(oh, 2, ow, 2).sum(axis=(1, 3))
    if img.ndim == 3:
        n = n[..., None]
    return ((2 * s + n) // (2 * n)).astype(img.dtype)


def build_pyramid(level0: np.ndarray, n_levels: int) -> list[np.ndarray]:
    levels = [np.ascontiguousarray(level0, dtype=np.uint8)]
    for _ in range(1, n_levels):
        levels.append(box_downsample(levels[-1]))
    return levels


def write_slide(
    directory: str | os.PathLike,
    slide_id: str,
    level0: np.ndarray,
    base_magnification: float = 20.0,
    n_levels: int = 4,
    label: int | None = None,
) -> Slide:
    """Write a halving pyramid container and return the opened slide."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, raster in enumerate(build_pyramid(level0, n_levels)):
        name = f"level_{i}.ppm"
        write_ppm(d / name, raster)
        entries.append(
            {
                "width": int(raster.shape[1]),
                "height": int(raster.shape[0]),
                "magnification": base_magnification / 2**i,
                "file": name,
            }
        )
    meta = {"id": slide_id, "label": label, "levels": entries}
    (d / SLIDE_META).write_text(json.dumps(meta, indent=1))
    return open_slide(d)


def open_slide(path: str | os.PathLike) -> Slide:
    """Index a slide container without reading pixel data."""
    d = Path(path)
    meta_path = d / SLIDE_META
    try:
        meta = json.loads(meta_path.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: missing {SLIDE_META}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{meta_path}: invalid JSON ({exc})") from exc
    try:
        slide_id = str(meta["id"])
        label = meta.get("label")
        raw_levels = meta["levels"]
        if not isinstance(raw_levels, list) or not raw_levels:
            raise FormatError(f"{meta_path}: 'levels' must be a non-empty list")
        levels = tuple(
            LevelMeta(int(lv["width"]), int(lv["height"]), float(lv["magnification"])) for lv in raw_levels
        )
        files = tuple(str(lv["file"]) for lv in raw_levels)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"{meta_path}: malformed metadata ({exc!r})") from exc
    if label is not None and label not in (0, 1):
        raise FormatError(f"{meta_path}: label must be 0, 1 or null, got {label!r}")

    base = levels[0].magnification
    for i in range(1, len(levels)):
        prev, cur = levels[i - 1], levels[i]
        if (cur.width, cur.height) != ((prev.width + 1) // 2, (prev.height + 1) // 2):
            raise ConsistencyError(f"{meta_path}: level {i} is not a halving of level {i - 1}")
        if not math.isclose(cur.magnification, base / 2**i, rel_tol=1e-9):
            raise ConsistencyError(f"{meta_path}: level {i} magnification {cur.magnification} != {base / 2**i}")

    offsets = []
    for lv, name in zip(levels, files):
        fpath = d / name
        if not fpath.exists():
            raise FormatError(f"{d}: missing raster {name}")
        w, h, offset = read_ppm_header(fpath)
        if (w, h) != (lv.width, lv.height):
            raise ConsistencyError(f"{fpath}: raster is {w}x{h}, metadata declares {lv.width}x{lv.height}")
        offsets.append(offset)
    return Slide(slide_id, label, levels, d, files, tuple(offsets))


def read_region(slide: Slide, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
    """Copy of an RGB uint8 region (h, w, 3). Out-of-bounds requests raise."""
    if not 0 <= level < len(slide.levels):
        raise BoundsError(f"level {level} not in [0, {len(slide.levels)})")
    lv = slide.levels[level]
    if w < 1 or h < 1:
        raise BoundsError(f"empty region {w}x{h}")
    if x < 0 or y < 0 or x + w > lv.width or y + h > lv.height:
        raise BoundsError(f"region ({x},{y},{w},{h}) outside level {level} ({lv.width}x{lv.height})")
    return np.array(slide._raster(level)[y : y + h, x : x + w])


def read_level(slide: Slide, level: int) -> np.ndarray:
    lv = slide.levels[level]
    return read_region(slide, level, 0, 0, lv.width, lv.height)


# -- annotations -------------------------------------------------------------


def _normalise_polygon(vertices: Sequence[Sequence[float]], bounds: tuple[int, int] | None) -> np.ndarray:
    pts = np.asarray(vertices, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FormatError(f"polygon vertices must be [x, y] pairs, got shape {pts.shape}")
    if len(pts) >= 2 and np.array_equal(pts[0], pts[-1]):
        pts = pts[:-1]
    if len(pts) < 3:
        raise FormatError(f"polygon needs >= 3 distinct vertices, got {len(pts)}")
    if bounds is not None:
        w, h = bounds
        if (pts[:, 0] < 0).any() or (pts[:, 1] < 0).any() or (pts[:, 0] > w).any() or (pts[:, 1] > h).any():
            raise BoundsError(f"polygon vertex outside level-0 bounds {w}x{h}")
    return pts


def make_annotations(slide_id: str, polygons, bounds: tuple[int, int] | None = None) -> AnnotationSet:
    return AnnotationSet(slide_id, tuple(_normalise_polygon(p, bounds) for p in polygons))


def write_annotations(path: str | os.PathLike, annotations: AnnotationSet) -> None:
    doc = {
        "slide_id": annotations.slide_id,
        "polygons": [[[_num(x), _num(y)] for x, y in poly] for poly in annotations.polygons],
    }
    Path(path).write_text(json.dumps(doc))


def _num(v: float):
    v = float(v)
    return int(v) if v.is_integer() else v


def load_annotations(path: str | os.PathLike, slide: Slide | None = None) -> AnnotationSet:
    """Parse an annotation file.

    When ``slide`` is given the ids must match and every vertex must lie inside
    its level-0 bounds; otherwise a sibling ``slide.json`` is used if present.
    """
    p = Path(path)
    try:
        doc = json.loads(p.read_text())
        slide_id = str(doc["slide_id"])
        raw = doc["polygons"]
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{p}: cannot parse annotations ({exc!r})") from exc
    if slide is None and (p.parent / SLIDE_META).exists():
        slide = open_slide(p.parent)
    bounds = None
    if slide is not None:
        if slide.id != slide_id:
            raise FormatError(f"{p}: annotations reference slide {slide_id!r}, container is {slide.id!r}")
        bounds = slide.dimensions
    return make_annotations(slide_id, raw, bounds)


def point_in_polygons(xs: np.ndarray, ys: np.ndarray, polygons: Sequence[np.ndarray]) -> np.ndarray:
    """Even-odd rule containment of points in the union of polygons."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    inside_any = np.zeros(xs.shape, dtype=bool)
    for poly in polygons:
        inside = np.zeros(xs.shape, dtype=bool)
        px, py = poly[:, 0], poly[:, 1]
        qx, qy = np.roll(px, -1), np.roll(py, -1)
        for x1, y1, x2, y2 in zip(px, py, qx, qy):
            crosses = (y1 > ys) != (y2 > ys)
            with np.errstate(divide="ignore", invalid="ignore"):
                x_int = x1 + (ys - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (xs < x_int)
        inside_any |= inside
    return inside_any
