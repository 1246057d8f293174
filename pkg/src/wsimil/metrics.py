"""Slide-level ROC/AUC, log loss and percentile bootstrap intervals."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ClassError, InputError

EVAL_CLIP = 1e-15
N_BOOTSTRAP = 1000


@dataclass(frozen=True)
class ScoredSet:
    slide_ids: tuple[str, ...]
    scores: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_lists(cls, slide_ids: Sequence[str] | None, scores, labels) -> ScoredSet:
        s = np.asarray(scores, dtype=np.float64)
        y = np.asarray(labels).astype(np.int64)
        if s.ndim != 1 or s.shape != y.shape:
            raise InputError(f"scores and labels must be equal-length vectors, got {s.shape} and {y.shape}")
        if not np.isin(y, (0, 1)).all():
            raise InputError("labels must be 0 or 1")
        ids = tuple(slide_ids) if slide_ids is not None else tuple(str(i) for i in range(len(s)))
        if len(ids) != len(s):
            raise InputError("slide_ids length differs from scores")
        return cls(ids, s, y)

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self.labels) - self.n_pos

    def subset(self, idx: np.ndarray) -> ScoredSet:
        return ScoredSet(tuple(self.slide_ids[i] for i in idx), self.scores[idx], self.labels[idx])


@dataclass(frozen=True)
class CiResult:
    point: float
    lo: float
    hi: float
    n_iter: int = N_BOOTSTRAP

    def to_json(self) -> dict:
        return {"point": self.point, "lo": self.lo, "hi": self.hi, "n_iter": self.n_iter}


def _require_both(s: ScoredSet) -> None:
    if s.n_pos == 0 or s.n_neg == 0:
        raise ClassError(f"need both classes (positives={s.n_pos}, negatives={s.n_neg})")


def _as_set(s) -> ScoredSet:
    if isinstance(s, ScoredSet):
        return s
    scores, labels = s
    return ScoredSet.from_lists(None, scores, labels)


def auc(s) -> float:
    """Mann-Whitney AUC: (concordant pairs + ties/2) / (P*N), via mid-ranks."""
    s = _as_set(s)
    _require_both(s)
    _, inv, counts = np.unique(s.scores, return_inverse=True, return_counts=True)
    mid = np.cumsum(counts) - (counts - 1) / 2.0
    ranks = mid[inv]
    p, n = s.n_pos, s.n_neg
    return float((ranks[s.labels == 1].sum() - p * (p + 1) / 2.0) / (p * n))


def roc_counts(s) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (false positive, true positive) counts at each distinct threshold, from (0, 0)."""
    s = _as_set(s)
    _require_both(s)
    order = np.argsort(-s.scores, kind="mergesort")
    sc = s.scores[order]
    y = s.labels[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    last = np.r_[np.nonzero(np.diff(sc))[0], len(sc) - 1]
    return np.r_[0, fp[last]], np.r_[0, tp[last]]


def roc_curve(s) -> list[tuple[float, float]]:
    """(FPR, TPR) points from (0, 0) to (1, 1), one per distinct score threshold."""
    s = _as_set(s)
    fp, tp = roc_counts(s)
    return list(zip((fp / s.n_neg).tolist(), (tp / s.n_pos).tolist()))


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    pts = np.asarray(points, dtype=np.float64)
    x, y = pts[:, 0], pts[:, 1]
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


def log_loss(s, clip: float = EVAL_CLIP) -> float:
    s = _as_set(s)
    if len(s) == 0:
        raise InputError("log loss of an empty set")
    p = np.clip(s.scores, clip, 1.0 - clip)
    y = s.labels
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log(1 - p))))


def bootstrap_ci(
    s,
    metric: Callable[[ScoredSet], float],
    n_iter: int = N_BOOTSTRAP,
    rng: np.random.Generator | int = 0,
) -> CiResult:
    """Percentile interval (2.5, 97.5) over ``n_iter`` same-size resamples.

    A resample holding only one class is redrawn, so exactly ``n_iter``
    replicates always contribute.
    """
    s = _as_set(s)
    point = metric(s)
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    n = len(s)
    vals = np.empty(n_iter, dtype=np.float64)
    for i in range(n_iter):
        while True:
            idx = rng.integers(0, n, size=n)
            pos = int(s.labels[idx].sum())
            if 0 < pos < n:
                break
        vals[i] = metric(s.subset(idx))
    lo, hi = np.percentile(vals, [2.5, 97.5])
    return CiResult(float(point), float(lo), float(hi), n_iter)


@dataclass
class EvalReport:
    scored: ScoredSet
    auc: CiResult
    log_loss: CiResult
    roc: list

    def to_json(self) -> dict:
        return {
            "per_slide": [
                {"slide_id": i, "score": float(sc), "label": int(lb)}
                for i, sc, lb in zip(self.scored.slide_ids, self.scored.scores, self.scored.labels)
            ],
            "auc": self.auc.to_json(),
            "log_loss": self.log_loss.to_json(),
            "roc": [[fpr, tpr] for fpr, tpr in self.roc],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def evaluate(s: ScoredSet, n_iter: int = N_BOOTSTRAP, seed: int = 0) -> EvalReport:
    """AUC and log loss with bootstrap CIs (independent, equally seeded streams)."""
    _require_both(s)
    return EvalReport(
        s,
        bootstrap_ci(s, auc, n_iter, np.random.default_rng(seed)),
        bootstrap_ci(s, log_loss, n_iter, np.random.default_rng(seed)),
        roc_curve(s),
    )


REPORT_SCHEMA = {
    "type": "object",
    "required": ["per_slide", "auc", "log_loss", "roc"],
    "properties": {
        "per_slide": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["slide_id", "score", "label"],
                "properties": {
                    "slide_id": {"type": "string"},
                    "score": {"type": "number", "minimum": 0, "maximum": 1},
                    "label": {"enum": [0, 1]},
                },
            },
        },
        "auc": {"$ref": "#/definitions/ci"},
        "log_loss": {"$ref": "#/definitions/ci"},
        "roc": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}},
    },
    "definitions": {
        "ci": {
            "type": "object",
            "required": ["point", "lo", "hi", "n_iter"],
            "properties": {
                "point": {"type": "number"},
                "lo": {"type": "number"},
                "hi": {"type": "number"},
                "n_iter": {"type": "integer"},
            },
        }
    },
}


def roc_svg(curves: dict[str, Sequence[tuple[float, float]]], size: int = 360) -> str:
    """Plain-text SVG of one or more ROC curves."""
    pad = 40
    span = size - 2 * pad
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#000"/>',
        f'<line x1="{pad}" y1="{pad + span}" x2="{pad + span}" y2="{pad}" stroke="#aaa" stroke-dasharray="4 4"/>',
        f'<text x="{size / 2}" y="{size - 8}" text-anchor="middle" font-size="12">False positive rate</text>',
        f'<text x="12" y="{size / 2}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {size / 2})">True positive rate</text>',
    ]
    for i, (name, pts) in enumerate(curves.items()):
        c = colours[i % len(colours)]
        coords = " ".join(f"{pad + fpr * span:.2f},{pad + (1 - tpr) * span:.2f}" for fpr, tpr in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{c}" stroke-width="2"/>')
        parts.append(f'<text x="{pad + span - 4}" y="{pad + span - 8 - 14 * i}" text-anchor="end" font-size="11" fill="{c}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
