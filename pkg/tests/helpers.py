"""Independent reference implementations used by unit and acceptance tests."""

from __future__ import annotations

import itertools
import math
from fractions import Fraction

import numpy as np

from wsimil import training
from wsimil.cnn import ArchSpec, conv_backward, conv_forward, forward, init_model, loss_and_backward, predict_proba
from wsimil.corpus import CorpusConfig, build_corpus, load_index
from wsimil.metrics import ScoredSet
from wsimil.slide_io import point_in_polygons
from wsimil.tissue import TileRef, extract_tile, grid_shape, tissue_grid, tissue_mask
from wsimil.training import EpochStats, TrainConfig, TrainHistory

TOY_GRID = dict(magnification=10.0, tile_size=32, stride=16)


def small_index(root, n_pos: int, n_neg: int, size: int = 192, seed: int = 0):
    cfg = CorpusConfig(
        n_pos=n_pos,
        n_neg=n_neg,
        width=size,
        height=size,
        n_levels=3,
        splits={"train": 1.0, "validation": 0.0, "test": 0.0},
        clusters=(1, 1),
    )
    build_corpus(root, cfg, seed=seed)
    return load_index(root, "train")


def early_stop_oracle(losses, patience: int) -> tuple[int, int]:
    """(stop epoch, best epoch): stop once ``patience`` epochs pass without a
    strict improvement on the best loss so far, or at the last epoch."""
    best_loss, best = math.inf, -1
    for e, loss in enumerate(losses):
        if loss < best_loss:
            best_loss, best = loss, e
        if e - best >= patience:
            return e, best
    return len(losses) - 1, best


def fit_on_losses(losses, patience: int = 10):
    """Drive the real training loop with stubbed epochs and validation losses.

    Each stub epoch writes its index into ``head.b`` so the returned
    parameters reveal which epoch's snapshot was kept.
    """
    cfg = TrainConfig(method="WS", tile_size=16, stride=8, conv_channels=(2,), max_epochs=len(losses), patience=patience)
    params = init_model(ArchSpec(16, (2,)), np.random.default_rng(0))
    epoch_of = iter(range(len(losses)))
    seen: list[int] = []

    def fake_epoch(p, index, c, buffer, rng, lr=None, epoch=0):
        p.params["head.b"][0] = epoch
        seen.append(epoch)
        return p, EpochStats(0.0, 0, 0, 0)

    def fake_val(p, index, grid, threads=1):
        return float(losses[next(epoch_of)])

    saved = training.ws_train_epoch, training.validation_loss
    training.ws_train_epoch, training.validation_loss = fake_epoch, fake_val
    try:
        history = TrainHistory()
        best = training._fit(params, None, [None], cfg, np.random.default_rng(0), "WS", False, history)
    finally:
        training.ws_train_epoch, training.validation_loss = saved
    return history, int(best.params["head.b"][0]), seen


def top_k_oracle(refs, scores, k: int):
    """Full sort by (-score, y, x)."""
    order = sorted(range(len(refs)), key=lambda i: (-scores[i], refs[i].y, refs[i].x))
    return [refs[i] for i in order[:k]]


def brute_force_tile_scores(params, entry, cfg: TrainConfig, restricted: bool):
    """Score every tissue tile of a slide one at a time."""
    slide = entry.slide
    keep = tissue_grid(slide, cfg.grid, tissue_mask(slide))
    refs = []
    for r, c in itertools.product(range(keep.shape[0]), range(keep.shape[1])):
        if keep[r, c]:
            refs.append(TileRef(slide.id, cfg.magnification, y=r * cfg.stride, x=c * cfg.stride, size=cfg.tile_size))
    if restricted:
        scale = slide.base_magnification / cfg.magnification
        cx = np.array([(r.x + r.size / 2) * scale for r in refs])
        cy = np.array([(r.y + r.size / 2) * scale for r in refs])
        inside = point_in_polygons(cx, cy, entry.annotations.polygons)
        refs = [r for r, ok in zip(refs, inside) if ok]
    scores = np.array([predict_proba(params, extract_tile(slide, r)[None])[0] for r in refs])
    return refs, scores


def check_selection(chosen, refs, scores, k: int, tol: float = 1e-6) -> bool:
    """``chosen`` equals the oracle top-k, up to swaps between near-equal scores."""
    want = top_k_oracle(refs, scores, k)
    if list(chosen) == want:
        return True
    score_of = dict(zip(refs, scores))
    got_s = np.array([score_of[r] for r in chosen])
    want_s = np.array([score_of[r] for r in want])
    return len(chosen) == len(want) and bool(np.all(np.abs(got_s - want_s) < tol))


def dense_grid_size(slide, cfg) -> tuple[int, int]:
    w, h = slide.dimensions_at(cfg.magnification)
    return grid_shape(w, h, cfg.tile_size, cfg.stride)


# -- finite differences --------------------------------------------------------


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


def _central_diff(f, arr, eps=1e-6):
    num = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        up = f()
        arr[idx] = old - eps
        dn = f()
        arr[idx] = old
        num[idx] = (up - dn) / (2 * eps)
    return num


def conv_gradient_error(seed: int) -> float:
    """Conv layer alone: d/d(x, w, b) of sum(z * r) vs central differences."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (2, 6, 6, 2))
    w = rng.uniform(-1, 1, (3, 3, 2, 3))
    b = rng.uniform(-1, 1, 3)
    r = rng.standard_normal((2, 3, 3, 3))
    _, cols = conv_forward(x, w, b)
    grads = conv_backward(r, cols, w, x.shape)

    def f():
        return float((conv_forward(x, w, b)[0] * r).sum())

    return max(float(rel_err(g, _central_diff(f, arr)).max()) for arr, g in zip((x, w, b), grads))


def model_gradient_error(seed: int) -> float:
    """Every parameter gradient of the full loss (3 conv blocks + head, 8x8
    inputs, float64) vs central differences; max element-wise relative error."""
    rng = np.random.default_rng(seed)
    params = init_model(ArchSpec(input_size=8, conv_channels=(3, 4, 5)), rng, dtype=np.float64)
    for k in params.params:
        if k.endswith(".b"):
            params.params[k][:] = rng.uniform(-0.2, 0.2, params.params[k].shape)
    x = rng.uniform(-1, 1, (4, 8, 8, 3))
    y = np.array([0, 1, 1, 0])
    _, cache = forward(params, x)
    _, grads = loss_and_backward(params, cache, y)

    def f():
        _, c = forward(params, x)
        return loss_and_backward(params, c, y)[0]

    return max(float(rel_err(grads[k], _central_diff(f, arr)).max()) for k, arr in params.params.items())


# -- thresholds and ranking ----------------------------------------------------


def otsu_brute_force(hist) -> int:
    """Exhaustive argmax of w0*w1*(mu0-mu1)^2 over all 255 splits in exact
    arithmetic, smallest t on ties."""
    hist = [int(h) for h in hist]
    total = sum(hist)
    n_cum = list(itertools.accumulate(hist))
    s_cum = list(itertools.accumulate(i * c for i, c in enumerate(hist)))
    best_t, best = None, None
    for t in range(255):
        n0 = n_cum[t]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = Fraction(s_cum[t], n0)
        mu1 = Fraction(s_cum[-1] - s_cum[t], n1)
        score = Fraction(n0, total) * Fraction(n1, total) * (mu0 - mu1) ** 2
        if best is None or score > best:
            best_t, best = t, score
    return best_t


def random_histogram(rng) -> np.ndarray:
    kind = rng.integers(3)
    if kind == 0:
        return rng.integers(0, 50, 256)
    h = np.zeros(256, dtype=np.int64)
    idx = rng.choice(256, size=int(rng.integers(2, 8)), replace=False)
    h[idx] = rng.integers(1, 20, len(idx))
    if kind == 2:
        # symmetric pair invites exact ties
        h[:] = 0
        a = int(rng.integers(0, 120))
        h[a] = h[255 - a] = int(rng.integers(1, 9))
    return h


def pair_count_auc(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ranked correctly, ties count half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos, neg = scores[labels == 1], scores[labels == 0]
    wins = int((pos[:, None] > neg[None, :]).sum())
    ties = int((pos[:, None] == neg[None, :]).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def random_set(rng, n: int) -> ScoredSet:
    labels = rng.integers(0, 2, n)
    labels[:2] = [0, 1]
    scores = rng.random(n)
    # inject ties across and within classes
    scores = np.round(scores, int(rng.integers(1, 4)))
    return ScoredSet.from_lists(None, scores, labels)
