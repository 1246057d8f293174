"""Tissue detection, grid enumeration, tile extraction and augmentation."""

from __future__ import annotations

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from wsimil.errors import BoundsError, ConfigError, DegenerateError, InputError
from wsimil.slide_io import make_annotations, read_level, read_region
from helpers import otsu_brute_force, random_histogram
from wsimil.tissue import (
    AugmentParams,
    GridConfig,
    TileRef,
    apply_augmentation,
    extract_tile,
    grid_locations,
    grid_shape,
    jitter_ref,
    luminance,
    luminance_histogram,
    otsu_threshold,
    read_tile_rgb,
    sample_augmentation,
    tissue_grid,
    tissue_mask,
)


def test_otsu_matches_brute_force_sample():
    rng = np.random.default_rng(0)
    for _ in range(100):
        h = random_histogram(rng)
        assert otsu_threshold(h) == otsu_brute_force(h)


def test_otsu_two_spikes_picks_lower():
    h = np.zeros(256, dtype=np.int64)
    h[40] = h[200] = 10
    assert otsu_threshold(h) == 40


def test_otsu_degenerate():
    h = np.zeros(256, dtype=np.int64)
    h[100] = 9
    with pytest.raises(DegenerateError):
        otsu_threshold(h)


def test_luminance_integer_rounding():
    img = np.array([[[255, 255, 255], [0, 0, 0], [1, 0, 1], [10, 20, 30]]], dtype=np.uint8)
    # 0.299*10 + 0.587*20 + 0.114*30 = 18.15
    assert luminance(img).tolist() == [[255, 0, 0, 18]]
    with pytest.raises(InputError):
        luminance_histogram(np.zeros((0, 0, 3), dtype=np.uint8))


def test_tissue_mask_finds_square(checker_slide):
    m = tissue_mask(checker_slide)
    assert m.level == 2 and m.downsample == 4.0
    expect = np.zeros((96, 128), dtype=bool)
    expect[24:72, 32:96] = True
    np.testing.assert_array_equal(m.mask, expect)


@pytest.mark.parametrize("w, h, t, s, rc", [(1024, 1024, 224, 112, (8, 8)), (100, 50, 64, 32, (0, 2)), (64, 64, 64, 32, (1, 1))])
def test_grid_shape(w, h, t, s, rc):
    assert grid_shape(w, h, t, s) == rc


def naive_tissue_grid(slide, cfg, mask):
    width, height = slide.dimensions_at(cfg.magnification)
    rows, cols = grid_shape(width, height, cfg.tile_size, cfg.stride)
    scale = slide.base_magnification / cfg.magnification
    ds = mask.downsample
    out = np.zeros((rows, cols), dtype=bool)
    ty, tx = np.nonzero(mask.mask)
    for r in range(rows):
        for c in range(cols):
            x0, y0 = c * cfg.stride * scale, r * cfg.stride * scale
            x1, y1 = x0 + cfg.tile_size * scale, y0 + cfg.tile_size * scale
            hit = (tx * ds < x1) & ((tx + 1) * ds > x0) & (ty * ds < y1) & ((ty + 1) * ds > y0)
            out[r, c] = bool(hit.any())
    return out


@pytest.mark.parametrize("cfg", [GridConfig(32, 16, 10.0), GridConfig(48, 24, 20.0), GridConfig(20, 7, 7.0)])
def test_tissue_grid_matches_naive(checker_slide, cfg):
    m = tissue_mask(checker_slide)
    np.testing.assert_array_equal(tissue_grid(checker_slide, cfg, m), naive_tissue_grid(checker_slide, cfg, m))


def test_restricted_grid_uses_tile_centres(checker_slide):
    cfg = GridConfig(32, 16, 10.0)
    m = tissue_mask(checker_slide)
    poly = [[150, 110], [330, 130], [300, 270], [200, 200], [140, 260]]
    ann = make_annotations("checker", [poly])
    full = grid_locations(checker_slide, cfg, m)
    got = grid_locations(checker_slide, cfg, m, ann)
    shape = Polygon(poly)
    # centres in level-0 pixels: scale 2 from x10 to x20
    want = [r for r in full if shape.contains(Point((r.x + 16) * 2, (r.y + 16) * 2))]
    assert got == want and 0 < len(got) < len(full)


def test_grid_locations_row_major(checker_slide):
    refs = grid_locations(checker_slide, GridConfig(32, 16, 10.0), tissue_mask(checker_slide))
    assert refs == sorted(refs)


def test_grid_config_validation():
    with pytest.raises(ConfigError):
        GridConfig(32, 0)
    with pytest.raises(ConfigError):
        GridConfig(32, 33)
    with pytest.raises(ConfigError):
        GridConfig(32, 16, 0.0)


def test_extract_exact_level(checker_slide):
    ref = TileRef("checker", 10.0, y=40, x=64, size=32)
    tile = extract_tile(checker_slide, ref)
    assert tile.dtype == np.float32
    np.testing.assert_array_equal(tile, read_region(checker_slide, 1, 64, 40, 32, 32).astype(np.float32) / 255)


def test_extract_between_levels(checker_slide):
    # x8 has no level: resampled from x10 (level 1)
    ref = TileRef("checker", 8.0, y=0, x=0, size=16)
    tile = read_tile_rgb(checker_slide, ref)
    assert tile.shape == (16, 16, 3)
    flat = read_level(checker_slide, 1)[:20, :20].reshape(-1, 3)
    assert np.all(tile.reshape(-1, 3).max(0) <= flat.max(0))


def test_extract_out_of_bounds(checker_slide):
    with pytest.raises(BoundsError):
        extract_tile(checker_slide, TileRef("checker", 10.0, y=170, x=0, size=32))


def test_augmentation_ops():
    tile = np.random.default_rng(0).random((4, 4, 3)).astype(np.float32)
    np.testing.assert_array_equal(apply_augmentation(tile, AugmentParams(hflip=True)), tile[:, ::-1])
    np.testing.assert_array_equal(apply_augmentation(tile, AugmentParams(vflip=True)), tile[::-1])
    np.testing.assert_array_equal(apply_augmentation(tile, AugmentParams(rot90=1)), np.rot90(tile))
    shifted = apply_augmentation(tile, AugmentParams(colour_shift=(0.5, -0.5, 0.0)))
    assert shifted.min() >= 0 and shifted.max() <= 1
    np.testing.assert_allclose(shifted[..., 2], tile[..., 2])


def test_augmentation_draw_count_is_fixed():
    a, b = np.random.default_rng(1), np.random.default_rng(1)
    sample_augmentation(a)
    b.random(4), b.integers(0, 4), b.uniform(-0.05, 0.05, 3)
    assert a.random() == b.random()


def test_jitter_stays_in_bounds(checker_slide):
    rng = np.random.default_rng(0)
    for _ in range(200):
        ref = jitter_ref(checker_slide, TileRef("checker", 10.0, y=0, x=224, size=32), 16, rng)
        assert 0 <= ref.x <= 256 - 32 and 0 <= ref.y <= 192 - 32
