"""Pyramid container: round trips, halving consistency, bounds and annotations."""

from __future__ import annotations

import json

import numpy as np
import pytest
from shapely.geometry import Point, Polygon

from wsimil.errors import BoundsError, ConsistencyError, FormatError
from wsimil.slide_io import (
    ANNOTATION_FILE,
    SLIDE_META,
    box_downsample,
    load_annotations,
    make_annotations,
    open_slide,
    point_in_polygons,
    read_level,
    read_ppm,
    read_region,
    write_annotations,
    write_ppm,
    write_slide,
)


def naive_box(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[:2]
    out = np.zeros(((h + 1) // 2, (w + 1) // 2, 3), dtype=np.uint8)
    for r in range(out.shape[0]):
        for c in range(out.shape[1]):
            block = img[2 * r : 2 * r + 2, 2 * c : 2 * c + 2].reshape(-1, 3).astype(int)
            n = len(block)
            for ch in range(3):
                s = int(block[:, ch].sum())
                # round half up on s / n
                q, rem = divmod(s, n)
                out[r, c, ch] = q + (1 if 2 * rem >= n else 0)
    return out


@pytest.mark.parametrize("shape", [(8, 8), (7, 9), (1, 5), (5, 1), (3, 3)])
def test_box_downsample_matches_naive(shape):
    rng = np.random.default_rng(sum(shape))
    img = rng.integers(0, 256, size=(*shape, 3), dtype=np.uint8)
    np.testing.assert_array_equal(box_downsample(img), naive_box(img))


def test_box_downsample_rounds_half_up():
    img = np.zeros((2, 2, 3), dtype=np.uint8)
    img[0, 0] = 1
    img[0, 1] = 1  # mean 0.5 -> 1
    assert box_downsample(img)[0, 0, 0] == 1


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(13, 17, 3), dtype=np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    np.testing.assert_array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_slide_round_trip_and_pyramid(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(101, 130, 3), dtype=np.uint8)
    slide = write_slide(tmp_path / "s", "s1", img, base_magnification=40.0, n_levels=4, label=1)
    assert slide.id == "s1" and slide.label == 1
    assert [slide.level_dimensions(i) for i in range(4)] == [(130, 101), (65, 51), (33, 26), (17, 13)]
    assert [lv.magnification for lv in slide.levels] == [40.0, 20.0, 10.0, 5.0]
    np.testing.assert_array_equal(read_level(slide, 0), img)
    expect = img
    for i in range(1, 4):
        expect = naive_box(expect)
        np.testing.assert_array_equal(read_level(slide, i), expect)


def test_read_region_matches_slice_and_is_a_copy(checker_slide):
    full = read_level(checker_slide, 1)
    region = read_region(checker_slide, 1, 10, 20, 30, 40)
    np.testing.assert_array_equal(region, full[20:60, 10:40])
    region[:] = 0
    np.testing.assert_array_equal(read_region(checker_slide, 1, 10, 20, 30, 40), full[20:60, 10:40])


@pytest.mark.parametrize(
    "args",
    [(0, -1, 0, 4, 4), (0, 0, -1, 4, 4), (0, 510, 0, 4, 4), (0, 0, 382, 4, 4), (5, 0, 0, 1, 1), (0, 0, 0, 0, 3)],
)
def test_read_region_out_of_bounds(checker_slide, args):
    with pytest.raises(BoundsError):
        read_region(checker_slide, *args)


def test_source_level_selection(checker_slide):
    assert checker_slide.source_level(20) == 0
    assert checker_slide.source_level(10) == 1
    assert checker_slide.source_level(7) == 1
    assert checker_slide.source_level(5) == 2
    assert checker_slide.dimensions_at(10) == (256, 192)
    assert checker_slide.dimensions_at(8) == (204, 153)


def test_missing_metadata(tmp_path):
    with pytest.raises(FormatError):
        open_slide(tmp_path)


def test_corrupt_metadata(checker_slide):
    (checker_slide.path / SLIDE_META).write_text("{not json")
    with pytest.raises(FormatError):
        open_slide(checker_slide.path)


def test_truncated_raster(checker_slide):
    f = checker_slide.path / "level_1.ppm"
    f.write_bytes(f.read_bytes()[:-10])
    with pytest.raises(ConsistencyError):
        open_slide(checker_slide.path)


def test_non_halving_level_rejected(checker_slide):
    meta = json.loads((checker_slide.path / SLIDE_META).read_text())
    meta["levels"][1]["width"] += 1
    (checker_slide.path / SLIDE_META).write_text(json.dumps(meta))
    with pytest.raises(ConsistencyError):
        open_slide(checker_slide.path)


def test_wrong_magnification_rejected(checker_slide):
    meta = json.loads((checker_slide.path / SLIDE_META).read_text())
    meta["levels"][2]["magnification"] = 4.0
    (checker_slide.path / SLIDE_META).write_text(json.dumps(meta))
    with pytest.raises(ConsistencyError):
        open_slide(checker_slide.path)


class TestAnnotations:
    def test_round_trip_drops_closing_vertex(self, checker_slide):
        ann = make_annotations("checker", [[[10, 10], [50, 10], [50, 40.5], [10, 10]]])
        assert len(ann.polygons[0]) == 3
        write_annotations(checker_slide.path / ANNOTATION_FILE, ann)
        back = load_annotations(checker_slide.path / ANNOTATION_FILE)
        np.testing.assert_array_equal(back.polygons[0], ann.polygons[0])

    def test_too_few_vertices(self):
        with pytest.raises(FormatError):
            make_annotations("x", [[[0, 0], [1, 1], [0, 0]]])

    def test_vertex_out_of_bounds(self, checker_slide):
        write_annotations(
            checker_slide.path / ANNOTATION_FILE, make_annotations("checker", [[[0, 0], [600, 0], [0, 10]]])
        )
        with pytest.raises(BoundsError):
            load_annotations(checker_slide.path / ANNOTATION_FILE)

    def test_slide_id_mismatch(self, checker_slide):
        write_annotations(checker_slide.path / ANNOTATION_FILE, make_annotations("other", [[[0, 0], [5, 0], [0, 5]]]))
        with pytest.raises(FormatError):
            load_annotations(checker_slide.path / ANNOTATION_FILE, checker_slide)


def test_point_in_polygons_matches_shapely():
    rng = np.random.default_rng(3)
    for _ in range(20):
        # star-shaped (possibly concave) polygon around a centre
        n = int(rng.integers(3, 12))
        ang = np.sort(rng.uniform(0, 2 * np.pi, n))
        rad = rng.uniform(5, 40, n)
        poly = np.c_[50 + rad * np.cos(ang), 50 + rad * np.sin(ang)]
        xs = rng.uniform(0, 100, 400) + 0.123
        ys = rng.uniform(0, 100, 400) + 0.456
        got = point_in_polygons(xs, ys, [poly])
        shape = Polygon(poly)
        want = np.array([shape.contains(Point(x, y)) for x, y in zip(xs, ys)])
        np.testing.assert_array_equal(got, want)


def test_point_in_union_of_polygons():
    a = np.array([[0, 0], [10, 0], [10, 10], [0, 10]], dtype=float)
    b = a + 20
    got = point_in_polygons(np.array([5, 25, 15]), np.array([5, 25, 15]), [a, b])
    assert got.tolist() == [True, True, False]
