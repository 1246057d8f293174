"""Fully-supervised (FS), weakly-supervised top-k MIL (WS) and FS->WS training.

Both methods walk the training slides in a balanced order (positive and
negative slides alternate, every negative slide once per epoch), push the
instances they pick into a buffer, and train on the shuffled buffer whenever it
holds at least ``T`` instances. FS picks ``k`` random tiles (annotated regions
on positive slides); WS picks the ``k`` tiles the current model scores highest
and labels them with the slide label.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .cnn import (
    PRETEXT_EPOCHS,
    TRAIN_CLIP,
    ArchSpec,
    ModelParams,
    bce_loss,
    forward,
    init_model,
    loss_and_backward,
    adam_step,
    lr_at,
    pretext_pretrain,
    set_freeze,
)
from .errors import AnnotationError, ConfigError, DatasetError, SelectionError
from .inference import predict_slides, score_refs
from .slide_io import AnnotationSet, Slide
from .synth import generate_texture_corpus
from .tissue import (
    GridConfig,
    TileRef,
    TissueMask,
    augment,
    extract_tile,
    grid_locations,
    jitter_ref,
    tissue_mask,
)

log = logging.getLogger(__name__)

METHODS = ("FS", "WS", "FS_WS")
ANNOTATED = "annotated"
DERIVED = "derived-from-bag"


@dataclass(frozen=True)
class TrainConfig:
    method: str = "WS"
    magnification: float = 10.0
    tile_size: int = 224
    stride: int = 112
    k: int | None = None  # None -> 40 for FS / FS_WS, 1 for WS
    ws_k: int = 1  # WS-stage k of FS_WS runs
    T: float = 128  # math.inf disables mid-epoch triggers
    batch: int = 32
    max_epochs: int = 100
    patience: int = 10
    transfer_learning: bool = True
    use_annotations: bool = True
    seed: int = 0
    base_lr: float = 0.001
    lr_decay: float = 0.95
    lr_every: int = 2
    colour_shift: float = 0.05
    jitter: int | None = None  # None -> stride // 2
    conv_channels: tuple[int, ...] = (16, 32, 64)
    pretext_per_class: int = 160
    pretext_epochs: int = PRETEXT_EPOCHS
    threads: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.k is None:
            object.__setattr__(self, "k", 1 if self.method == "WS" else 40)
        if self.jitter is None:
            object.__setattr__(self, "jitter", self.stride // 2)
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.k < 1 or self.ws_k < 1:
            raise ConfigError(f"k must be >= 1, got {self.k}")
        if self.batch < 1 or self.batch > self.T:
            raise ConfigError(f"batch must satisfy 1 <= batch <= T, got batch={self.batch}, T={self.T}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.method in ("FS", "FS_WS") and not self.use_annotations:
            raise ConfigError(f"{self.method} training needs annotated positive regions (use_annotations=true)")
        GridConfig(self.tile_size, self.stride, self.magnification)

    @property
    def grid(self) -> GridConfig:
        return GridConfig(self.tile_size, self.stride, self.magnification)

    @property
    def arch(self) -> ArchSpec:
        return ArchSpec(self.tile_size, self.conv_channels)

    def lr(self, epoch: int) -> float:
        return lr_at(epoch, self.base_lr, self.lr_decay, self.lr_every)


@dataclass
class SlideEntry:
    slide: Slide
    annotations: AnnotationSet | None
    label: int

    @property
    def id(self) -> str:
        return self.slide.id


class DatasetIndex:
    """Slides of one split with lazily computed tissue masks and tile grids."""

    def __init__(self, entries: list[SlideEntry], split: str = "train"):
        self.entries = list(entries)
        self.split = split
        self._masks: dict[str, TissueMask] = {}
        self._grids: dict[tuple, list[TileRef]] = {}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def positives(self) -> list[SlideEntry]:
        return [e for e in self.entries if e.label == 1]

    @property
    def negatives(self) -> list[SlideEntry]:
        return [e for e in self.entries if e.label == 0]

    def mask(self, entry: SlideEntry) -> TissueMask:
        m = self._masks.get(entry.id)
        if m is None:
            m = self._masks[entry.id] = tissue_mask(entry.slide)
        return m

    def candidates(self, entry: SlideEntry, grid: GridConfig, restricted: bool) -> list[TileRef]:
        """Tissue grid of ``entry``; annotation-restricted when ``restricted``."""
        key = (entry.id, grid, restricted)
        refs = self._grids.get(key)
        if refs is None:
            if restricted:
                if entry.annotations is None:
                    raise AnnotationError(f"slide {entry.id} has no annotations")
                refs = grid_locations(entry.slide, grid, self.mask(entry), entry.annotations)
            else:
                refs = grid_locations(entry.slide, grid, self.mask(entry))
            self._grids[key] = refs
        return refs

    def n_tiles(self, entry: SlideEntry, grid: GridConfig) -> int:
        return len(self.candidates(entry, grid, False))


@dataclass(frozen=True)
class Instance:
    ref: TileRef
    label: int
    provenance: str
    slide_index: int  # position of the source slide in the epoch order


@dataclass
class EpochStats:
    train_loss: float
    n_instances: int
    n_steps: int
    n_triggers: int


@dataclass
class TrainHistory:
    """Per-epoch records; ``stage`` separates FS and WS phases of FS_WS runs."""

    rows: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    stopped_epoch: int = -1
    patience: int = 10
    stages: dict = field(default_factory=dict)

    def append(self, stage: str, epoch: int, train_loss: float, val_loss: float, lr: float, seconds: float) -> None:
        self.rows.append(
            {"stage": stage, "epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr, "seconds": seconds}
        )

    def val_losses(self, stage: str | None = None) -> list[float]:
        return [r["val_loss"] for r in self.rows if stage is None or r["stage"] == stage]

    def write_csv(self, path) -> None:
        """Deterministic columns only; wall times go to a ``*.timing.csv`` sidecar."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "epoch", "train_loss", "val_loss", "lr"])
            for r in self.rows:
                w.writerow([r["stage"], r["epoch"], repr(r["train_loss"]), repr(r["val_loss"]), repr(r["lr"])])
        with open(path.with_suffix(".timing.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "epoch", "seconds"])
            for r in self.rows:
                w.writerow([r["stage"], r["epoch"], f"{r['seconds']:.3f}"])


# -- sampling ----------------------------------------------------------------


def balanced_epoch_order(index: DatasetIndex, rng: np.random.Generator) -> list[tuple[SlideEntry, int]]:
    """Alternate positive, negative, positive, ... with every negative exactly once.

    Positives are drawn from a shuffled cycle that is reshuffled each time it
    wraps around. Length is twice the number of negative slides.
    """
    pos, neg = index.positives, index.negatives
    if not pos or not neg:
        raise DatasetError(f"balanced sampling needs both classes (positives={len(pos)}, negatives={len(neg)})")
    neg_order = [neg[i] for i in rng.permutation(len(neg))]
    cycle: list[SlideEntry] = []
    out = []
    for n in neg_order:
        if not cycle:
            cycle = [pos[i] for i in rng.permutation(len(pos))]
        out.append((cycle.pop(0), 1))
        out.append((n, 0))
    return out


def fs_sample_tiles(
    index: DatasetIndex, entry: SlideEntry, grid: GridConfig, k: int, rng: np.random.Generator, slide_index: int = 0
) -> list[Instance]:
    """``k`` uniformly drawn tiles, with replacement only if fewer than ``k`` exist."""
    if entry.label == 1:
        cands = index.candidates(entry, grid, restricted=True)
        if not cands:
            raise AnnotationError(f"positive slide {entry.id} has no annotated tissue tiles")
    else:
        cands = index.candidates(entry, grid, restricted=False)
        if not cands:
            raise DatasetError(f"slide {entry.id} has no tissue tiles")
    if len(cands) >= k:
        idx = rng.choice(len(cands), size=k, replace=False)
    else:
        idx = rng.integers(0, len(cands), size=k)
    return [Instance(cands[int(i)], entry.label, ANNOTATED, slide_index) for i in idx]


def top_k_select(
    params: ModelParams,
    slide: Slide,
    candidates: list[TileRef],
    k: int,
    scores: np.ndarray | None = None,
) -> list[tuple[TileRef, float]]:
    """The ``k`` highest-probability candidates, descending; ties go to row-major order."""
    if not candidates:
        raise SelectionError(f"no candidate tiles on slide {slide.id}")
    order = sorted(range(len(candidates)), key=lambda i: (candidates[i].y, candidates[i].x))
    refs = [candidates[i] for i in order]
    probs = score_refs(params, slide, refs) if scores is None else np.asarray(scores, dtype=np.float64)[order]
    ranked = np.argsort(-probs, kind="stable")[:k]
    return [(refs[i], float(probs[i])) for i in ranked]


def ws_candidates(index: DatasetIndex, entry: SlideEntry, cfg: TrainConfig) -> list[TileRef]:
    restricted = entry.label == 1 and cfg.use_annotations
    return index.candidates(entry, cfg.grid, restricted)


# -- buffer ------------------------------------------------------------------


class TrainingBuffer:
    """Instances waiting for a training pass. ``log`` keeps everything ever added."""

    def __init__(self, trigger: float, record: bool = False):
        self.trigger = trigger
        self.items: list[Instance] = []
        self.record = record
        self.log: list[Instance] = []
        self.batches: list[int] = []  # size of every optimiser batch, in order

    def __len__(self) -> int:
        return len(self.items)

    def add(self, instances: list[Instance]) -> None:
        self.items.extend(instances)
        if self.record:
            self.log.extend(instances)

    @property
    def ready(self) -> bool:
        return len(self.items) >= self.trigger


def _make_batch(index: DatasetIndex, items: list[Instance], cfg: TrainConfig, rng: np.random.Generator):
    by_id = {e.id: e for e in index.entries}
    tiles = []
    for inst in items:
        slide = by_id[inst.ref.slide_id].slide
        ref = jitter_ref(slide, inst.ref, cfg.jitter, rng) if cfg.jitter else inst.ref
        tiles.append(augment(extract_tile(slide, ref), rng, cfg.colour_shift))
    return np.stack(tiles), np.array([inst.label for inst in items], dtype=np.int64)


def drain_buffer(
    params: ModelParams,
    index: DatasetIndex,
    buffer: TrainingBuffer,
    cfg: TrainConfig,
    lr: float,
    rng: np.random.Generator,
) -> tuple[float, int, int]:
    """Shuffle, train on consecutive batches (last one may be short), clear.

    Returns (summed loss x batch size, instances consumed, optimiser steps).
    """
    items = [buffer.items[i] for i in rng.permutation(len(buffer.items))]
    buffer.items = []
    total, steps = 0.0, 0
    for i in range(0, len(items), cfg.batch):
        part = items[i : i + cfg.batch]
        x, y = _make_batch(index, part, cfg, rng)
        _, cache = forward(params, x)
        loss, grads = loss_and_backward(params, cache, y)
        adam_step(params, grads, lr)
        buffer.batches.append(len(part))
        total += loss * len(part)
        steps += 1
    return total, len(items), steps


def _run_epoch(
    params: ModelParams,
    index: DatasetIndex,
    cfg: TrainConfig,
    buffer: TrainingBuffer,
    rng: np.random.Generator,
    lr: float,
    pick: Callable[[SlideEntry, int], list[Instance]],
) -> EpochStats:
    total = 0.0
    consumed = steps = triggers = 0
    for pos, (entry, _) in enumerate(balanced_epoch_order(index, rng)):
        buffer.add(pick(entry, pos))
        if buffer.ready:
            s, n, k = drain_buffer(params, index, buffer, cfg, lr, rng)
            total, consumed, steps, triggers = total + s, consumed + n, steps + k, triggers + 1
    if len(buffer):
        s, n, k = drain_buffer(params, index, buffer, cfg, lr, rng)
        total, consumed, steps = total + s, consumed + n, steps + k
    return EpochStats(total / max(consumed, 1), consumed, steps, triggers)


def fs_train_epoch(params, index, cfg: TrainConfig, buffer: TrainingBuffer, rng, lr: float | None = None, epoch: int = 0):
    lr = cfg.lr(epoch) if lr is None else lr

    def pick(entry: SlideEntry, pos: int) -> list[Instance]:
        return fs_sample_tiles(index, entry, cfg.grid, cfg.k, rng, pos)

    return params, _run_epoch(params, index, cfg, buffer, rng, lr, pick)


def ws_train_epoch(params, index, cfg: TrainConfig, buffer: TrainingBuffer, rng, lr: float | None = None, epoch: int = 0):
    """One MIL epoch: inference picks the top-k tiles of each visited slide,
    which inherit the slide label and feed the trigger buffer."""
    lr = cfg.lr(epoch) if lr is None else lr

    def pick(entry: SlideEntry, pos: int) -> list[Instance]:
        cands = ws_candidates(index, entry, cfg)
        chosen = top_k_select(params, entry.slide, cands, cfg.k)
        return [Instance(ref, entry.label, DERIVED, pos) for ref, _ in chosen]

    return params, _run_epoch(params, index, cfg, buffer, rng, lr, pick)


# -- validation / early stopping --------------------------------------------


def validation_loss(params: ModelParams, index: DatasetIndex, grid: GridConfig, threads: int = 1) -> float:
    """Slide-level BCE of max-pooled probabilities."""
    if len(index) == 0:
        raise ConfigError("validation split is empty")
    probs = predict_slides(params, [e.slide for e in index.entries], grid, threads)
    labels = np.array([e.label for e in index.entries])
    return bce_loss(np.asarray(probs), labels, TRAIN_CLIP)


def early_stop_check(val_losses: list[float], patience: int) -> str:
    """``"stop"`` once the latest epoch is ``patience`` epochs past the best one."""
    if not val_losses:
        return "continue"
    best = int(np.argmin(val_losses))
    return "stop" if (len(val_losses) - 1) - best >= patience else "continue"


def _fit(
    params: ModelParams,
    train: DatasetIndex,
    val: DatasetIndex,
    cfg: TrainConfig,
    rng: np.random.Generator,
    stage: str,
    warm_started: bool,
    history: TrainHistory,
) -> ModelParams:
    if len(val) == 0:
        raise ConfigError("validation split is empty")
    epoch_fn = ws_train_epoch if stage == "WS" else fs_train_epoch
    best_params, best_loss, best_epoch = params.copy(), math.inf, -1
    losses: list[float] = []
    for epoch in range(cfg.max_epochs):
        if warm_started:
            set_freeze(params, "first_epoch" if epoch == 0 else "after")
        t0 = time.perf_counter()
        buffer = TrainingBuffer(cfg.T)
        lr = cfg.lr(epoch)
        params, stats = epoch_fn(params, train, cfg, buffer, rng, lr, epoch)
        vloss = validation_loss(params, val, cfg.grid, cfg.threads)
        losses.append(vloss)
        history.append(stage, epoch, stats.train_loss, vloss, lr, time.perf_counter() - t0)
        log.info("%s epoch %d: train %.4f val %.4f lr %.6f", stage, epoch, stats.train_loss, vloss, lr)
        if vloss < best_loss:
            best_loss, best_epoch = vloss, epoch
            best_params = params.copy()
        if early_stop_check(losses, cfg.patience) == "stop":
            break
    set_freeze(best_params, "after")
    history.best_epoch = best_epoch
    history.stopped_epoch = epoch
    history.patience = cfg.patience
    return best_params


def initial_params(cfg: TrainConfig, rng: np.random.Generator) -> ModelParams:
    """Pretext warm start when transfer learning is on, Glorot otherwise."""
    if cfg.transfer_learning:
        corpus = generate_texture_corpus(cfg.pretext_per_class, cfg.tile_size, rng)
        return pretext_pretrain(cfg.arch, corpus, rng, epochs=cfg.pretext_epochs)
    return init_model(cfg.arch, rng)


def fs_train(train: DatasetIndex, val: DatasetIndex, cfg: TrainConfig, params: ModelParams | None = None):
    cfg = replace(cfg, method="FS") if cfg.method != "FS" else cfg
    rng = np.random.default_rng(cfg.seed)
    warm = params is None and cfg.transfer_learning
    params = initial_params(cfg, rng) if params is None else params.copy()
    history = TrainHistory()
    best = _fit(params, train, val, cfg, rng, "FS", warm, history)
    return best, history


def ws_train(train: DatasetIndex, val: DatasetIndex, cfg: TrainConfig, params: ModelParams | None = None, history=None):
    rng = np.random.default_rng(cfg.seed)
    warm = params is None and cfg.transfer_learning
    params = initial_params(cfg, rng) if params is None else params.copy()
    history = TrainHistory() if history is None else history
    best = _fit(params, train, val, cfg, rng, "WS", warm, history)
    return best, history


def fs_ws_train(train: DatasetIndex, val: DatasetIndex, cfg_fs: TrainConfig, cfg_ws: TrainConfig):
    """FS training, then WS refinement from the best FS checkpoint with fresh
    epoch numbering and early-stopping state."""
    fs_params, history = fs_train(train, val, cfg_fs)
    fs_best, fs_stop = history.best_epoch, history.stopped_epoch
    ws_params = fs_params.copy()
    for layer in ws_params.steps:
        ws_params.steps[layer] = 0
    for k in ws_params.params:
        ws_params.m[k][...] = 0
        ws_params.v[k][...] = 0
    best, history = ws_train(train, val, replace(cfg_ws, method="WS"), ws_params, history)
    history.stages = {"FS": (fs_best, fs_stop), "WS": (history.best_epoch, history.stopped_epoch)}
    return best, history


def train(train_index: DatasetIndex, val_index: DatasetIndex, cfg: TrainConfig):
    """Dispatch on ``cfg.method``; returns (best params, history)."""
    if cfg.method == "FS":
        return fs_train(train_index, val_index, cfg)
    if cfg.method == "WS":
        return ws_train(train_index, val_index, cfg)
    return fs_ws_train(train_index, val_index, replace(cfg, method="FS"), replace(cfg, method="WS", k=cfg.ws_k))
