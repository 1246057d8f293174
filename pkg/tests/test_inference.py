"""Slide scoring, heatmap geometry, Grad-CAM coverage and flat-image classification."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from helpers import dense_grid_size
from wsimil.cnn import predict_proba
from wsimil.errors import EmptySlideError, SizeError, StateError
from wsimil.inference import (
    Heatmap,
    classify_flat_image,
    forward_single,
    grad_cam_heatmap,
    grad_cam_tile,
    image_grid_probs,
    predict_slide,
    predict_slides,
    probability_heatmap,
    read_pgm,
    rescale_image,
)
from wsimil.tissue import GridConfig, TileRef, TissueMask, extract_tile, tissue_grid, tissue_mask


def test_slide_probability_is_max_over_tissue_tiles(checker_slide, tiny_model):
    prob, grid = predict_slide(tiny_model, checker_slide, 32, 16, 10.0)
    keep = tissue_grid(checker_slide, GridConfig(32, 16, 10.0), tissue_mask(checker_slide))
    scores = []
    for r, c in zip(*np.nonzero(keep)):
        ref = TileRef("checker", 10.0, y=int(r) * 16, x=int(c) * 16, size=32)
        scores.append(predict_proba(tiny_model, extract_tile(checker_slide, ref)[None])[0])
    assert prob == pytest.approx(max(scores), rel=1e-6)
    np.testing.assert_array_equal(grid.scored, keep)
    np.testing.assert_allclose(grid.probs[keep], scores, rtol=1e-6)
    assert np.all(grid.probs[~keep] == 0)


def test_empty_slide(checker_slide, tiny_model):
    m = tissue_mask(checker_slide)
    empty = TissueMask(np.zeros_like(m.mask), m.level, m.downsample, m.threshold)
    with pytest.raises(EmptySlideError):
        predict_slide(tiny_model, checker_slide, 32, 16, 10.0, mask=empty)


def test_threads_do_not_change_scores(checker_slide, toy_index, tiny_model):
    slides = [checker_slide] + [e.slide for e in toy_index.entries]
    cfg = GridConfig(32, 16, 10.0)
    assert predict_slides(tiny_model, slides, cfg, threads=1) == predict_slides(tiny_model, slides, cfg, threads=3)


def test_probability_heatmap_geometry(checker_slide, tiny_model, tmp_path):
    _, grid = predict_slide(tiny_model, checker_slide, 32, 16, 10.0)
    rows, cols = dense_grid_size(checker_slide, GridConfig(32, 16, 10.0))
    hm = probability_heatmap(grid)
    assert hm.values.shape == (rows * 16, cols * 16)
    np.testing.assert_array_equal(hm.values[::16, ::16], grid.probs)
    pgm, meta = hm.write(tmp_path / "p.pgm")
    img = read_pgm(pgm)
    assert img.shape == hm.values.shape
    np.testing.assert_array_equal(img, np.floor(hm.values * 255 + 0.5).astype(np.uint8))
    side = json.loads(meta.read_text())
    assert side == {"stride": 16, "tile_size": 32, "magnification": 10.0, "provenance": "probability", "width": cols * 16, "height": rows * 16}


@pytest.mark.parametrize("stride", [16, 8, 32])
def test_grad_cam_coverage(checker_slide, tiny_model, stride):
    hm, cover = grad_cam_heatmap(tiny_model, checker_slide, stride=stride, magnification=10.0, return_coverage=True)
    t = 32
    n = math.ceil(t / stride)
    rows, cols = dense_grid_size(checker_slide, GridConfig(t, stride, 10.0))
    # interior: covered by a full complement of overlapping tiles on both axes
    y_end, x_end = (rows - 1) * stride + t, (cols - 1) * stride + t
    interior = cover[t - stride : y_end - t + stride, t - stride : x_end - t + stride]
    assert interior.size > 0 and np.all(interior == n * n)
    assert np.all(cover[y_end:] == 0) and np.all(cover[:, x_end:] == 0)
    assert hm.values.shape == cover.shape
    assert hm.values.min() >= 0 and hm.values.max() <= 1
    assert hm.values.max() == 1.0 or hm.values.max() == 0.0


def test_grad_cam_tile_from_cache_matches_direct(tiny_model):
    tile = np.random.default_rng(0).random((32, 32, 3)).astype(np.float32)
    _, cache = forward_single(tiny_model, tile)
    np.testing.assert_allclose(grad_cam_tile(tiny_model, cache=cache), grad_cam_tile(tiny_model, tile), rtol=1e-5)
    with pytest.raises(StateError):
        grad_cam_tile(tiny_model)


def test_rescale_2000_to_500():
    img = np.random.default_rng(0).integers(0, 256, size=(2000, 2000, 3), dtype=np.uint8)
    assert rescale_image(img, 40.0, 10.0).shape == (500, 500, 3)


def test_flat_image_classification(tiny_model):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(400, 400, 3), dtype=np.uint8)
    prob = classify_flat_image(tiny_model, img, source_mag=40.0, target_mag=10.0)
    small = rescale_image(img, 40.0, 10.0)
    assert small.shape == (100, 100, 3)
    probs = image_grid_probs(tiny_model, small, 32, 16)
    assert probs.shape == (5, 5)
    assert prob == probs.max()


def test_flat_image_too_small(tiny_model):
    with pytest.raises(SizeError):
        classify_flat_image(tiny_model, np.zeros((60, 60, 3), dtype=np.uint8), 40.0, 10.0)


def test_heatmap_write_clips(tmp_path):
    hm = Heatmap(np.array([[0.0, 0.5], [1.0, 0.999]]), "gradcam", 32, 64, 10.0)
    pgm, _ = hm.write(tmp_path / "g.pgm")
    assert read_pgm(pgm).tolist() == [[0, 128], [255, 255]]
