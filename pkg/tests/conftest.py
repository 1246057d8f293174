"""Shared fixtures: a toy on-disk corpus, a tiny architecture, acceptance summary."""

from __future__ import annotations

import numpy as np
import pytest

from wsimil.cnn import ArchSpec, init_model
from wsimil.corpus import CorpusConfig, build_corpus, load_index
from wsimil.slide_io import write_slide

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores one acceptance line, then asserts ``ok``."""

    def _record(n: int, ok: bool, detail: str = "") -> None:
        ACCEPTANCE[n] = (bool(ok), detail)
        print(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, f"criterion {n}: {detail}"

    return _record


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    """Six 256x256 slides (2 positive, 4 negative), all in the train split."""
    root = tmp_path_factory.mktemp("toy")
    cfg = CorpusConfig(
        n_pos=2,
        n_neg=4,
        width=256,
        height=256,
        n_levels=3,
        splits={"train": 1.0, "validation": 0.0, "test": 0.0},
        clusters=(1, 1),
    )
    build_corpus(root, cfg, seed=11)
    return root


@pytest.fixture(scope="session")
def toy_index(toy_corpus):
    return load_index(toy_corpus, "train")


@pytest.fixture
def tiny_arch():
    return ArchSpec(input_size=32, conv_channels=(4, 8, 8))


@pytest.fixture
def tiny_model(tiny_arch):
    return init_model(tiny_arch, np.random.default_rng(0))


@pytest.fixture
def checker_slide(tmp_path):
    """512x384 slide: noisy tissue square on a flat light background."""
    rng = np.random.default_rng(5)
    img = np.full((384, 512, 3), 240, dtype=np.uint8)
    img[96:288, 128:384] = rng.integers(60, 160, size=(192, 256, 3), dtype=np.uint8)
    return write_slide(tmp_path / "checker", "checker", img, base_magnification=20.0, n_levels=3)
