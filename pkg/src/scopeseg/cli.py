"""Command-line entry point: ``segment``, ``eval`` and ``extract``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from collections.abc import Sequence
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .config import (
    CLIP_BACKBONES,
    MASK_SOURCES,
    SIMILARITY_SOURCES,
    ConfigError,
    DatasetConfig,
    PipelineConfig,
    load_config,
    load_mapping,
)
from .evaluation import EmptyEvaluationError, format_table, run_ablation, run_benchmark, strip_timing
from .images import label_png, overlay, read_image, read_label_map
from .pipeline import build_classes, segment_image
from .providers import ProviderError, RecordingProvider, TensorArchive, make_provider

log = logging.getLogger("scopeseg")


class CliError(Exception):
    """A user-facing failure; the message is printed and the exit code is ``code``."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# Flag name -> config key, for flags whose value is taken verbatim.
_VALUE_FLAGS = {
    "provider": "provider",
    "clip": "clip",
    "similarity": "similarity",
    "mask_source": "mask_source",
    "pred_iou_thresh": "pred_iou_thresh",
    "stability_thresh": "stability_thresh",
    "points": "points",
    "multimask": "multimask",
    "eps": "eps",
    "samples": "samples",
    "tau": "tau",
    "window": "window",
    "stride": "stride",
    "resize_short": "resize_short",
    "templates": "templates",
    "plural_map": "plural_map",
    "background_subclasses": "background_subclasses",
    "device": "device",
}


def _pipeline_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("pipeline (each flag overrides the matching --config key)")
    g.add_argument("--config", help="YAML/JSON file of pipeline settings")
    g.add_argument("--provider", help="live | synthetic | fixture:<dir>")
    g.add_argument("--clip", choices=sorted(CLIP_BACKBONES))
    g.add_argument("--similarity", choices=["auto", *SIMILARITY_SOURCES])
    g.add_argument("--mask-source", choices=list(MASK_SOURCES))
    g.add_argument("--pred-iou-thresh", type=float)
    g.add_argument("--stability-thresh", type=float)
    g.add_argument("--points", type=int, help="SAM point grid side")
    g.add_argument("--multimask", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--eps", type=float, help="DBSCAN cosine radius")
    g.add_argument("--samples", type=int, help="DBSCAN min_samples")
    g.add_argument("--tau", type=float, help="softmax temperature with value reconstruction")
    g.add_argument("--window", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--resize-short", type=int)
    g.add_argument("--templates", help="imagenet | single")
    g.add_argument("--plural-map", help="JSON file, or 'none'")
    g.add_argument("--background-subclasses", help="JSON file or packaged key")
    g.add_argument("--device")
    for comp in ("sr", "vr", "mc", "nc"):
        g.add_argument(f"--no-{comp}", dest=comp, action="store_const", const=False, default=None)
    return p


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    overrides: dict[str, Any] = {}
    for flag, key in _VALUE_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    for comp in ("sr", "vr", "mc", "nc"):
        if getattr(args, comp, None) is not None:
            overrides[comp] = getattr(args, comp)
    try:
        return load_config(args.config, **overrides)
    except FileNotFoundError as exc:
        raise CliError(f"config file not found: {exc.filename}") from exc
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid configuration: {exc}") from exc


def parse_classes(spec: str) -> list[str]:
    """Comma-separated names, or a file (.json/.yaml list, or one name per line)."""
    path = Path(spec)
    if path.is_file():
        if path.suffix.lower() in (".json", ".yaml", ".yml"):
            data = load_mapping(path)
            if isinstance(data, dict):
                data = data.get("classes")
            if not isinstance(data, list):
                raise CliError(f"{path}: expected a list of class names")
            names = [str(x) for x in data]
        else:
            names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    else:
        names = [s.strip() for s in spec.split(",")]
    names = [n for n in names if n]
    if not names:
        raise CliError("no class names given")
    return names


def _provider(cfg: PipelineConfig, classes: list[str]):
    try:
        return make_provider(cfg.provider, cfg, classes)
    except FileNotFoundError as exc:
        raise CliError(f"provider missing: {exc}. Check the 'provider' config key.", 2) from exc
    except ProviderError as exc:
        raise CliError(str(exc), 2) from exc
    except ValueError as exc:
        raise CliError(f"{exc}. Check the 'provider' config key.", 2) from exc


def _write_atomic(files: dict[Path, Any]) -> None:
    """Write every (image, pnginfo) pair to a temp file first, then rename all."""
    staged: list[tuple[str, Path]] = []
    try:
        for target, (im, info) in files.items():
            target.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=target.parent, suffix=".png.part")
            os.close(fd)
            staged.append((tmp, target))
            im.save(tmp, format="PNG", pnginfo=info)
        for tmp, target in staged:
            os.replace(tmp, target)
    finally:
        for tmp, _ in staged:
            if os.path.exists(tmp):
                os.unlink(tmp)


def _pixel_shares(labels: np.ndarray, classes: list[str]) -> list[tuple[str, float]]:
    counts = np.bincount(labels.ravel(), minlength=len(classes))
    total = max(int(labels.size), 1)
    return [(name, counts[i] / total) for i, name in enumerate(classes)]


def _run_pipeline(image: np.ndarray, provider, classes: list[str], cfg: PipelineConfig, gt: np.ndarray | None,
                  background_index: int | None):
    try:
        setup = build_classes(provider, classes, cfg, background_index)
        return segment_image(image, provider, setup, cfg, gt=gt)
    except ProviderError as exc:
        raise CliError(str(exc), 2) from exc


def cmd_segment(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    classes = parse_classes(args.classes)
    if len(classes) > 255:
        raise CliError("at most 255 classes fit in an 8-bit label map")
    try:
        image = read_image(args.image)
        gt = read_label_map(args.gt) if args.gt else None
    except OSError as exc:
        raise CliError(str(exc)) from exc
    provider = _provider(cfg, classes)
    result = _run_pipeline(image, provider, classes, cfg, gt, args.background_index)
    labels = result.seg.labels

    info = {"classes": classes, "config": cfg.to_dict()}
    out = Path(args.out)
    lab_im, png_info = label_png(labels, info)
    _write_atomic({
        out.with_name(out.name + ".labels.png"): (lab_im, png_info),
        out.with_name(out.name + ".overlay.png"): (Image.fromarray(overlay(image, labels)), png_info),
    })
    width = max(len(c) for c in classes)
    for name, share in _pixel_shares(labels, classes):
        print(f"{name:<{width}}  {100 * share:6.2f}%")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    path = Path(args.dataset)
    if not path.is_file():
        raise CliError(f"dataset config not found: {path}")
    try:
        data_cfg = DatasetConfig.load(path)
    except (ConfigError, TypeError) as exc:
        raise CliError(f"invalid dataset config {path}: {exc}") from exc
    if not Path(data_cfg.root).is_dir():
        raise CliError(f"dataset root not found: {data_cfg.root}")
    try:
        if args.ablate:
            components = [c.strip() for c in args.ablate.split(",") if c.strip()]
            report = run_ablation(data_cfg, cfg, components, args.limit)
        else:
            report = run_benchmark(data_cfg, cfg, args.limit)
    except EmptyEvaluationError as exc:
        raise CliError(str(exc)) from exc
    except ProviderError as exc:
        raise CliError(str(exc), 2) from exc
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from exc

    stable, timing = strip_timing(report)
    table = format_table(stable)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_name(out.name + ".json").write_text(json.dumps(stable, indent=1, sort_keys=True) + "\n")
        out.with_name(out.name + ".txt").write_text(table)
        out.with_name(out.name + ".timing.json").write_text(json.dumps(timing, indent=1, sort_keys=True) + "\n")
    print(table, end="")
    return 0


def cmd_extract(args: argparse.Namespace) -> int:
    cfg = resolve_config(args)
    if cfg.provider.startswith("fixture:"):
        raise CliError("extract records a live or synthetic provider; --provider fixture:... has nothing to record")
    classes = parse_classes(args.classes)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise CliError(f"{out} exists and is not empty (use --force to overwrite)")
    try:
        image = read_image(args.image)
        gt = read_label_map(args.gt) if args.gt else None
    except OSError as exc:
        raise CliError(str(exc)) from exc

    inner = _provider(cfg, classes)
    archive = TensorArchive({"classes": classes, "config": cfg.to_dict(), "source_provider": cfg.provider})
    recorder = RecordingProvider(inner, archive)
    result = _run_pipeline(image, recorder, classes, cfg, gt, args.background_index)
    archive.put("reference/labels", result.seg.labels, dtype="i32")
    archive.save(out, force=args.force)
    print(f"wrote {len(archive.names())} tensors to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scopeseg", description="Training-free open-vocabulary segmentation.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _pipeline_flags()

    seg = sub.add_parser("segment", parents=[common], help="segment one image")
    seg.add_argument("image")
    seg.add_argument("--classes", required=True, help="comma-separated names or a class-list file")
    seg.add_argument("--out", required=True, help="output prefix for <out>.labels.png and <out>.overlay.png")
    seg.add_argument("--gt", help="label map used when --mask-source groundtruth")
    seg.add_argument("--background-index", type=int)
    seg.set_defaults(func=cmd_segment)

    ev = sub.add_parser("eval", parents=[common], help="benchmark or ablate over a dataset")
    ev.add_argument("dataset", help="dataset config file")
    ev.add_argument("--limit", type=int, help="evaluate only the first N samples")
    ev.add_argument("--ablate", help="comma-separated components, e.g. sr,vr,mc,nc")
    ev.add_argument("--out", help="output prefix for <out>.json, <out>.txt and <out>.timing.json")
    ev.set_defaults(func=cmd_eval)

    ex = sub.add_parser("extract", parents=[common], help="record provider outputs into a fixture archive")
    ex.add_argument("image")
    ex.add_argument("--classes", required=True)
    ex.add_argument("--out", required=True, help="archive directory")
    ex.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    ex.add_argument("--gt", help="label map used when --mask-source groundtruth")
    ex.add_argument("--background-index", type=int)
    ex.set_defaults(func=cmd_extract)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
