"""Synthetic corpora on disk and the manifest that splits them."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .slide_io import ANNOTATION_FILE, load_annotations, open_slide
from .synth import SynthSpec, generate_synthetic_slide
from .training import DatasetIndex, SlideEntry

MANIFEST = "manifest.json"
SPLITS = ("train", "validation", "test")


@dataclass
class CorpusConfig:
    n_pos: int = 19
    n_neg: int = 93
    width: int = 1024
    height: int = 1024
    base_magnification: float = 20.0
    n_levels: int = 4
    splits: dict = field(default_factory=lambda: {"train": 60 / 112, "validation": 12 / 112, "test": 40 / 112})
    blobs: tuple[int, int] = (2, 3)
    clusters: tuple[int, int] = (1, 2)
    motif_density: int = 14

    def validate(self) -> None:
        if self.n_pos < 0 or self.n_neg < 0 or self.n_pos + self.n_neg == 0:
            raise ConfigError("corpus needs at least one slide")
        if set(self.splits) - set(SPLITS):
            raise ConfigError(f"unknown split names {set(self.splits) - set(SPLITS)}")
        fr = [float(self.splits.get(s, 0.0)) for s in SPLITS]
        if any(f < 0 for f in fr) or not np.isclose(sum(fr), 1.0):
            raise ConfigError(f"split fractions must be >= 0 and sum to 1, got {self.splits}")


def split_counts(n: int, fractions: dict) -> dict[str, int]:
    """Round train/validation sizes, give the remainder to test."""
    tr = int(round(n * float(fractions.get("train", 0.0))))
    va = int(round(n * float(fractions.get("validation", 0.0))))
    tr = min(tr, n)
    va = min(va, n - tr)
    return {"train": tr, "validation": va, "test": n - tr - va}


def build_corpus(out_dir: str | os.PathLike, cfg: CorpusConfig, seed: int, force: bool = False) -> dict:
    """Generate every slide and write ``manifest.json``. Returns the manifest."""
    cfg.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    labels = [1] * cfg.n_pos + [0] * cfg.n_neg
    specs = []
    for i, label in enumerate(labels):
        specs.append(
            SynthSpec(
                seed=int(rng.integers(2**31)),
                width=cfg.width,
                height=cfg.height,
                label=label,
                n_tissue_blobs=int(rng.integers(cfg.blobs[0], cfg.blobs[1] + 1)),
                n_positive_clusters=int(rng.integers(cfg.clusters[0], cfg.clusters[1] + 1)) if label else 0,
                motif_density=cfg.motif_density,
            )
        )
    # ids carry no label information: shuffle before numbering
    order = rng.permutation(len(specs))
    ids = {int(j): f"slide_{n:03d}" for n, j in enumerate(order)}
    split_of: dict[int, str] = {}
    for label in (1, 0):
        members = [i for i, lb in enumerate(labels) if lb == label]
        members = [members[j] for j in rng.permutation(len(members))]
        counts = split_counts(len(members), cfg.splits)
        start = 0
        for name in SPLITS:
            for i in members[start : start + counts[name]]:
                split_of[i] = name
            start += counts[name]
    entries = []
    for i in sorted(range(len(specs)), key=lambda i: ids[i]):
        sid = ids[i]
        rel = f"slides/{sid}"
        generate_synthetic_slide(specs[i], out / rel, sid, cfg.base_magnification, cfg.n_levels)
        entries.append({"id": sid, "label": labels[i], "split": split_of[i], "path": rel, "seed": specs[i].seed})
    manifest = {
        "seed": seed,
        "generator": {
            "width": cfg.width,
            "height": cfg.height,
            "base_magnification": cfg.base_magnification,
            "n_levels": cfg.n_levels,
        },
        "slides": entries,
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_manifest(path: str | os.PathLike) -> tuple[dict, Path]:
    p = Path(path)
    if p.is_dir():
        p = p / MANIFEST
    try:
        return json.loads(p.read_text()), p.parent
    except FileNotFoundError as exc:
        raise DataError(f"manifest not found: {p}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from exc


def load_index(manifest_path: str | os.PathLike, split: str, with_annotations: bool = True) -> DatasetIndex:
    manifest, root = read_manifest(manifest_path)
    entries = []
    for rec in manifest["slides"]:
        if rec["split"] != split:
            continue
        slide = open_slide(root / rec["path"])
        ann_path = root / rec["path"] / ANNOTATION_FILE
        ann = load_annotations(ann_path, slide) if with_annotations and ann_path.exists() else None
        entries.append(SlideEntry(slide, ann, int(rec["label"])))
    return DatasetIndex(entries, split)
