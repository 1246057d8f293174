"""Command-line entry point: ``wsimil synth|train|predict|heatmap|evaluate``.

Every command reads a JSON run-config (``--config``) and lets flags override
individual fields. A minimal config::

    {
      "seed": 7,
      "paths": {"corpus": "corpus", "output": "runs/ws"},
      "synth": {"n_pos": 19, "n_neg": 93},
      "train": {"method": "WS", "magnification": 10, "k": 1},
      "grid": {"tile_size": 64, "stride": 32},
      "eval": {"n_iter": 1000, "split": "test"}
    }

Relative paths inside the config resolve against the config file's directory;
paths given as flags resolve against the working directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .cnn import load_checkpoint, save_checkpoint
from .corpus import MANIFEST, CorpusConfig, build_corpus, load_index, read_manifest
from .errors import ConfigError, DataError, WsimilError
from .inference import grad_cam_heatmap, predict_slide, predict_slides, probability_heatmap
from .metrics import N_BOOTSTRAP, ScoredSet, evaluate, roc_svg
from .slide_io import open_slide
from .tissue import GridConfig
from .training import TrainConfig, train

log = logging.getLogger("wsimil")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4

CHECKPOINT = "checkpoint.bin"
HISTORY = "history.csv"
REPORT = "report.json"
ROC_SVG = "roc.svg"
GRADCAM_STRIDE = 32

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)} - {"seed", "threads"}
_SYNTH_FIELDS = {f.name for f in dataclasses.fields(CorpusConfig)}
_GRID_FIELDS = {"tile_size", "stride", "magnification"}


@dataclass
class RunConfig:
    seed: int
    corpus: Path | None = None
    output: Path | None = None
    synth: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    grid: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    threads: int = 1

    def train_config(self) -> TrainConfig:
        opts = {**self.train, **self.grid}
        try:
            return TrainConfig(**opts, seed=self.seed, threads=self.threads)
        except TypeError as exc:
            raise ConfigError(f"bad train options: {exc}") from exc

    def corpus_config(self) -> CorpusConfig:
        opts = dict(self.synth)
        for key in ("blobs", "clusters"):
            if key in opts:
                opts[key] = tuple(opts[key])
        cfg = CorpusConfig(**opts)
        cfg.validate()
        return cfg

    def grid_config(self, fallback: dict | None = None) -> GridConfig:
        g = {**(fallback or {}), **self.grid}
        return GridConfig(int(g.get("tile_size", 224)), int(g.get("stride", 112)), float(g.get("magnification", 10.0)))

    def manifest(self) -> Path:
        if self.corpus is None:
            raise ConfigError("no corpus path (set paths.corpus or --corpus)")
        p = self.corpus / MANIFEST if self.corpus.is_dir() else self.corpus
        if not p.exists():
            raise ConfigError(f"manifest not found: {p}")
        return p

    def out_dir(self) -> Path:
        if self.output is None:
            raise ConfigError("no output path (set paths.output or --out)")
        return self.output


def _check_keys(section: str, given: dict, allowed: set[str]) -> None:
    unknown = set(given) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} option(s): {', '.join(sorted(unknown))}")


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the JSON config with flag overrides; flags win."""
    doc: dict = {}
    base = Path.cwd()
    if args.config is not None:
        path = Path(args.config)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
        base = path.resolve().parent
    _check_keys("top-level", doc, {"seed", "paths", "synth", "train", "grid", "eval"})

    seed = args.seed if getattr(args, "seed", None) is not None else doc.get("seed")
    if seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")

    paths = doc.get("paths", {})
    _check_keys("paths", paths, {"corpus", "output"})

    def resolve(flag, key):
        if flag is not None:
            return Path(flag)
        return base / paths[key] if key in paths else None

    synth = dict(doc.get("synth", {}))
    train_opts = dict(doc.get("train", {}))
    grid = dict(doc.get("grid", {}))
    ev = dict(doc.get("eval", {}))
    _check_keys("synth", synth, _SYNTH_FIELDS)
    _check_keys("train", train_opts, _TRAIN_FIELDS)
    _check_keys("grid", grid, _GRID_FIELDS)
    _check_keys("eval", ev, {"n_iter", "split", "seed"})

    for name in ("method", "k", "T", "batch", "max_epochs", "patience", "ws_k"):
        val = getattr(args, name, None)
        if val is not None:
            train_opts[name] = val
    if getattr(args, "transfer_learning", None) is not None:
        train_opts["transfer_learning"] = args.transfer_learning
    if getattr(args, "use_annotations", None) is not None:
        train_opts["use_annotations"] = args.use_annotations
    for name in ("tile_size", "stride", "magnification"):
        val = getattr(args, name, None)
        if val is not None:
            grid[name] = val
    if getattr(args, "n_iter", None) is not None:
        ev["n_iter"] = args.n_iter
    if getattr(args, "split", None) is not None:
        ev["split"] = args.split
    if train_opts.get("T") in ("inf", "Infinity"):
        train_opts["T"] = math.inf

    threads = getattr(args, "threads", 1) or 1
    if threads < 1:
        raise ConfigError(f"--threads must be >= 1, got {threads}")
    return RunConfig(
        seed=seed,
        corpus=resolve(getattr(args, "corpus", None), "corpus"),
        output=resolve(getattr(args, "out", None), "output"),
        synth=synth,
        train=train_opts,
        grid=grid,
        eval=ev,
        threads=threads,
    )


def _check_magnification(cfg: TrainConfig, manifest: dict) -> None:
    gen = manifest.get("generator", {})
    base = float(gen.get("base_magnification", cfg.magnification))
    if cfg.magnification > base:
        raise ConfigError(f"{cfg.method} at x{cfg.magnification:g} exceeds the corpus base magnification x{base:g}")
    f = cfg.magnification / base
    w, h = int(gen.get("width", 0)) * f, int(gen.get("height", 0)) * f
    if gen and (cfg.tile_size > w or cfg.tile_size > h):
        raise ConfigError(
            f"{cfg.method} at x{cfg.magnification:g}: {cfg.tile_size}px tiles do not fit {w:g}x{h:g} slides"
        )


# -- commands ------------------------------------------------------------------


def cmd_synth(rc: RunConfig, force: bool = False) -> int:
    out = rc.out_dir() if rc.corpus is None else rc.corpus
    manifest = build_corpus(out, rc.corpus_config(), rc.seed, force=force)
    n = len(manifest["slides"])
    counts = {s: sum(1 for e in manifest["slides"] if e["split"] == s) for s in ("train", "validation", "test")}
    print(f"wrote {n} slides to {out} ({', '.join(f'{k} {v}' for k, v in counts.items())})")
    return EXIT_OK


def cmd_train(rc: RunConfig) -> int:
    cfg = rc.train_config()
    manifest_path = rc.manifest()
    manifest, _ = read_manifest(manifest_path)
    _check_magnification(cfg, manifest)
    out = rc.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    train_idx = load_index(manifest_path, "train", with_annotations=cfg.use_annotations)
    val_idx = load_index(manifest_path, "validation", with_annotations=False)
    params, history = train(train_idx, val_idx, cfg)
    history.write_csv(out / HISTORY)
    doc = {k: v for k, v in dataclasses.asdict(cfg).items() if k != "threads"}
    doc["T"] = "inf" if math.isinf(cfg.T) else cfg.T
    extra = {
        "train": doc,
        "grid": {"tile_size": cfg.tile_size, "stride": cfg.stride, "magnification": cfg.magnification},
        "best_epoch": history.best_epoch,
        "stopped_epoch": history.stopped_epoch,
    }
    save_checkpoint(params, out / CHECKPOINT, extra)
    print(f"{cfg.method}: best epoch {history.best_epoch}, stopped at epoch {history.stopped_epoch}; wrote {out / CHECKPOINT}")
    return EXIT_OK


def _load_model(rc: RunConfig, checkpoint: str | None):
    path = Path(checkpoint) if checkpoint else rc.out_dir() / CHECKPOINT
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    arch = None
    if rc.train.get("conv_channels") is not None or "tile_size" in rc.grid:
        arch = rc.train_config().arch
    params, extra = load_checkpoint(path, arch)
    return params, extra


def cmd_predict(rc: RunConfig, slide_path: str, checkpoint: str | None, heatmaps: list[str], gradcam_stride: int | None) -> int:
    params, extra = _load_model(rc, checkpoint)
    grid = rc.grid_config(extra.get("grid"))
    slide = open_slide(slide_path)
    prob, tiles = predict_slide(params, slide, grid.tile_size, grid.stride, grid.magnification)
    print(f"{slide.id}\t{prob!r}")
    if heatmaps:
        out = rc.out_dir()
        out.mkdir(parents=True, exist_ok=True)
    if "prob" in heatmaps:
        pgm, _ = probability_heatmap(tiles).write(out / f"{slide.id}_prob.pgm")
        print(f"wrote {pgm}")
    if "gradcam" in heatmaps:
        stride = gradcam_stride or GRADCAM_STRIDE
        hm = grad_cam_heatmap(params, slide, stride=stride, tile_size=grid.tile_size, magnification=grid.magnification)
        pgm, _ = hm.write(out / f"{slide.id}_gradcam.pgm")
        print(f"wrote {pgm}")
    return EXIT_OK


def cmd_evaluate(rc: RunConfig, checkpoint: str | None, name: str | None) -> int:
    params, extra = _load_model(rc, checkpoint)
    grid = rc.grid_config(extra.get("grid"))
    split = rc.eval.get("split", "test")
    n_iter = int(rc.eval.get("n_iter", N_BOOTSTRAP))
    seed = int(rc.eval.get("seed", rc.seed))
    index = load_index(rc.manifest(), split, with_annotations=False)
    if len(index) == 0:
        raise DataError(f"split {split!r} is empty")
    scored = ScoredSet.from_lists([e.slide.id for e in index.entries], [0.0] * len(index), [e.label for e in index.entries])
    # fails fast on a single-class split before any scoring
    if scored.n_pos == 0 or scored.n_neg == 0:
        evaluate(scored, n_iter, seed)
    probs = predict_slides(params, [e.slide for e in index.entries], grid, rc.threads)
    scored = ScoredSet.from_lists(scored.slide_ids, probs, scored.labels)
    report = evaluate(scored, n_iter, seed)
    out = rc.out_dir()
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT).write_text(report.dumps())
    (out / ROC_SVG).write_text(roc_svg({name or extra.get("train", {}).get("method", "model"): report.roc}))
    a, ll = report.auc, report.log_loss
    print(f"AUC {a.point:.4f} [{a.lo:.4f}, {a.hi:.4f}]  log loss {ll.point:.4f} [{ll.lo:.4f}, {ll.hi:.4f}]")
    print(f"wrote {out / REPORT}")
    return EXIT_OK


# -- argument parsing --------------------------------------------------------------


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="output directory (overrides paths.output)")
    p.add_argument("--threads", type=int, default=1, help="worker cap for slide scoring (default 1)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _grid_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tile-size", dest="tile_size", type=int)
    p.add_argument("--stride", type=int)
    p.add_argument("--magnification", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsimil", description="Multiple-instance learning on tiled slide images.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic slide corpus")
    _common(p)
    p.add_argument("--corpus", help="corpus directory to create (overrides paths.corpus)")
    p.add_argument("--n-pos", dest="n_pos", type=int)
    p.add_argument("--n-neg", dest="n_neg", type=int)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")

    p = sub.add_parser("train", help="train a model; writes checkpoint and history CSV")
    _common(p)
    _grid_flags(p)
    p.add_argument("--corpus", help="corpus directory or manifest")
    p.add_argument("--method", choices=["FS", "WS", "FS_WS"])
    p.add_argument("--k", type=int, help="tiles per slide per epoch")
    p.add_argument("--ws-k", dest="ws_k", type=int, help="k for the WS stage of FS_WS")
    p.add_argument("--T", dest="T", type=int, help="buffer trigger size")
    p.add_argument("--batch", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    tl = p.add_mutually_exclusive_group()
    tl.add_argument("--transfer-learning", dest="transfer_learning", action="store_const", const=True)
    tl.add_argument("--no-transfer-learning", dest="transfer_learning", action="store_const", const=False)
    an = p.add_mutually_exclusive_group()
    an.add_argument("--annotations", dest="use_annotations", action="store_const", const=True)
    an.add_argument("--no-annotations", dest="use_annotations", action="store_const", const=False)

    for name, helptext in (("predict", "score one slide"), ("heatmap", "score one slide and write heatmaps")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        _grid_flags(p)
        p.add_argument("slide", help="slide directory")
        p.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.bin)")
        p.add_argument(
            "--heatmap",
            action="append",
            choices=["prob", "gradcam"],
            help="heatmap kind to write (repeatable); prob uses the scoring grid stride",
        )
        p.add_argument("--gradcam-stride", dest="gradcam_stride", type=int, help=f"default {GRADCAM_STRIDE}")

    p = sub.add_parser("evaluate", help="score a split and write report JSON and ROC SVG")
    _common(p)
    _grid_flags(p)
    p.add_argument("--corpus", help="corpus directory or manifest")
    p.add_argument("--checkpoint", help="checkpoint file (default <out>/checkpoint.bin)")
    p.add_argument("--split", choices=["train", "validation", "test"])
    p.add_argument("--n-iter", dest="n_iter", type=int, help=f"bootstrap iterations (default {N_BOOTSTRAP})")
    p.add_argument("--name", help="curve label in the SVG")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    rc = load_run_config(args)
    if args.command == "synth":
        for name in ("n_pos", "n_neg"):
            if getattr(args, name) is not None:
                rc.synth[name] = getattr(args, name)
        return cmd_synth(rc, args.force)
    if args.command == "train":
        return cmd_train(rc)
    if args.command in ("predict", "heatmap"):
        kinds = args.heatmap or []
        if args.command == "heatmap" and not kinds:
            kinds = ["prob", "gradcam"]
        return cmd_predict(rc, args.slide, args.checkpoint, kinds, args.gradcam_stride)
    return cmd_evaluate(rc, args.checkpoint, args.name)


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (WsimilError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
