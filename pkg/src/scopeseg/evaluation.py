"""mIoU accounting, dataset adapters and the benchmark / ablation runner."""

from __future__ import annotations

import json
import logging
import time
from collections.abc import Iterator
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image

from .config import DatasetConfig, PipelineConfig, load_mapping
from .pipeline import build_classes, segment_image
from .providers import Provider, make_provider

log = logging.getLogger(__name__)


class EmptyEvaluationError(ValueError):
    """Raised when mIoU is requested before any class has been seen."""


@dataclass
class ConfusionAccumulator:
    num_classes: int
    intersection: np.ndarray = field(default=None)  # type: ignore[assignment]
    union: np.ndarray = field(default=None)  # type: ignore[assignment]
    seen: np.ndarray = field(default=None)  # type: ignore[assignment]
    images: int = 0

    def __post_init__(self) -> None:
        k = self.num_classes
        if self.intersection is None:
            self.intersection = np.zeros(k, dtype=np.int64)
        if self.union is None:
            self.union = np.zeros(k, dtype=np.int64)
        if self.seen is None:
            self.seen = np.zeros(k, dtype=bool)

    def merge(self, other: ConfusionAccumulator) -> ConfusionAccumulator:
        if other.num_classes != self.num_classes:
            raise ValueError("accumulators disagree on the class count")
        return ConfusionAccumulator(
            self.num_classes,
            self.intersection + other.intersection,
            self.union + other.union,
            self.seen | other.seen,
            self.images + other.images,
        )

    def iou(self) -> np.ndarray:
        """Per-class IoU, NaN where the union is empty."""
        out = np.full(self.num_classes, np.nan)
        ok = self.union > 0
        out[ok] = self.intersection[ok] / self.union[ok]
        return out


def update(acc: ConfusionAccumulator, pred: np.ndarray, gt: np.ndarray, ignore_value: int = 255) -> ConfusionAccumulator:
    """Add one image's per-class intersection and union counts (in place)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != ignore_value
    p = pred[valid].astype(np.int64)
    g = gt[valid].astype(np.int64)
    k = acc.num_classes
    if p.size and (p.min() < 0 or p.max() >= k):
        raise ValueError(f"prediction labels must lie in [0, {k})")
    if g.size and (g.min() < 0 or g.max() >= k):
        raise ValueError(f"ground-truth labels must lie in [0, {k}) or equal {ignore_value}")
    area_p = np.bincount(p, minlength=k)
    area_g = np.bincount(g, minlength=k)
    inter = np.bincount(p[p == g], minlength=k)
    acc.intersection += inter
    acc.union += area_p + area_g - inter
    acc.seen |= (area_p + area_g) > 0
    acc.images += 1
    return acc


def miou(acc: ConfusionAccumulator) -> float:
    """Mean IoU over classes with a non-empty union."""
    ok = acc.union > 0
    if not ok.any():
        raise EmptyEvaluationError("nothing to evaluate: no class appeared in predictions or ground truth")
    return float(np.mean(acc.intersection[ok] / acc.union[ok]))


# ---------------------------------------------------------------- datasets

@dataclass
class Layout:
    image_glob: str
    label_for: Any
    reduce_zero_label: bool = False
    list_file: str | None = None
    image_for: Any = None


def _generic_label(root: Path, image: Path) -> Path:
    return root / "labels" / f"{image.stem}.png"


LAYOUTS: dict[str, Layout] = {
    "generic": Layout("images/*", _generic_label),
    "voc": Layout(
        "JPEGImages/*.jpg", lambda root, img: root / "SegmentationClass" / f"{img.stem}.png",
        list_file="ImageSets/Segmentation/{split}.txt",
        image_for=lambda root, sid: root / "JPEGImages" / f"{sid}.jpg",
    ),
    "voc20": Layout(
        "JPEGImages/*.jpg", lambda root, img: root / "SegmentationClass" / f"{img.stem}.png",
        reduce_zero_label=True, list_file="ImageSets/Segmentation/{split}.txt",
        image_for=lambda root, sid: root / "JPEGImages" / f"{sid}.jpg",
    ),
    "context": Layout(
        "JPEGImages/*.jpg", lambda root, img: root / "SegmentationClassContext" / f"{img.stem}.png",
        list_file="ImageSets/SegmentationContext/{split}.txt",
        image_for=lambda root, sid: root / "JPEGImages" / f"{sid}.jpg",
    ),
    "context59": Layout(
        "JPEGImages/*.jpg", lambda root, img: root / "SegmentationClassContext" / f"{img.stem}.png",
        reduce_zero_label=True, list_file="ImageSets/SegmentationContext/{split}.txt",
        image_for=lambda root, sid: root / "JPEGImages" / f"{sid}.jpg",
    ),
    "coco_stuff": Layout(
        "images/val2017/*.jpg",
        lambda root, img: root / "annotations" / "val2017" / f"{img.stem}_labelTrainIds.png",
    ),
    "coco_object": Layout(
        "images/val2017/*.jpg",
        lambda root, img: root / "annotations" / "val2017" / f"{img.stem}_instanceTrainIds.png",
    ),
    "ade20k": Layout(
        "images/validation/*.jpg",
        lambda root, img: root / "annotations" / "validation" / f"{img.stem}.png",
        reduce_zero_label=True,
    ),
    "cityscapes": Layout(
        "leftImg8bit/val/*/*_leftImg8bit.png",
        lambda root, img: root / "gtFine" / "val" / img.parent.name
        / img.name.replace("_leftImg8bit.png", "_gtFine_labelTrainIds.png"),
    ),
}


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}


@dataclass
class Sample:
    name: str
    image_path: Path
    label_path: Path


class Dataset:
    """Image / label-map pairs under one root, in a stable sorted order."""

    def __init__(self, cfg: DatasetConfig):
        self.cfg = cfg
        self.root = Path(cfg.root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset root not found: {self.root}")
        if cfg.layout not in LAYOUTS:
            raise ValueError(f"unknown dataset layout {cfg.layout!r}; known: {sorted(LAYOUTS)}")
        self.layout = LAYOUTS[cfg.layout]
        self.class_names = self._load_classes()
        self.samples = self._discover()

    def _load_classes(self) -> list[str]:
        if self.cfg.classes:
            return list(self.cfg.classes)
        path = Path(self.cfg.classes_file) if self.cfg.classes_file else self.root / "classes.json"
        if not path.is_absolute() and not path.exists():
            path = self.root / path
        if not path.is_file():
            raise FileNotFoundError(f"class list not found: {path}")
        data = load_mapping(path)
        if isinstance(data, dict):
            data = data.get("classes")
        if not isinstance(data, list) or not data:
            raise ValueError(f"{path}: expected a non-empty list of class names")
        return [str(c) for c in data]

    def _discover(self) -> list[Sample]:
        layout = self.layout
        if layout.list_file is not None:
            list_path = self.root / layout.list_file.format(split=self.cfg.split)
            if list_path.is_file():
                ids = [ln.strip() for ln in list_path.read_text().splitlines() if ln.strip()]
                images = [layout.image_for(self.root, sid) for sid in ids]
            else:
                images = sorted(self.root.glob(layout.image_glob))
        else:
            images = sorted(p for p in self.root.glob(layout.image_glob) if p.suffix.lower() in IMAGE_SUFFIXES)
        label_for = layout.label_for
        if self.cfg.label_suffix is not None:
            base = label_for
            label_for = lambda root, img: base(root, img).with_suffix(self.cfg.label_suffix)  # noqa: E731
        return [Sample(p.stem, p, label_for(self.root, p)) for p in images]

    def __len__(self) -> int:
        return len(self.samples)

    def load(self, sample: Sample) -> tuple[np.ndarray, np.ndarray]:
        with Image.open(sample.image_path) as im:
            image = np.asarray(im.convert("RGB"))
        with Image.open(sample.label_path) as im:
            label = np.asarray(im if im.mode in ("P", "L", "I", "I;16") else im.convert("L")).astype(np.int64)
        if label.shape != image.shape[:2]:
            raise ValueError(f"{sample.name}: label {label.shape} and image {image.shape[:2]} differ")
        if self.layout.reduce_zero_label:
            ignore = self.cfg.ignore_value
            label = np.where(label == 0, ignore, np.where(label == ignore, ignore, label - 1))
        return image, label


# ---------------------------------------------------------------- benchmark

def _effective_config(pipeline: PipelineConfig, data: DatasetConfig) -> PipelineConfig:
    changes: dict[str, Any] = {}
    if data.resize_short is not None:
        changes["resize_short"] = data.resize_short
    if data.background_subclasses is not None and pipeline.background_subclasses is None:
        changes["background_subclasses"] = data.background_subclasses
    if data.plural_map is not None and pipeline.plural_map is None:
        changes["plural_map"] = data.plural_map
    return pipeline.replace(**changes) if changes else pipeline


def run_benchmark(
    dataset_cfg: DatasetConfig,
    pipeline_cfg: PipelineConfig,
    sample_limit: int | None = None,
    provider: Provider | None = None,
    dataset: Dataset | None = None,
) -> dict[str, Any]:
    """Segment (the first ``sample_limit``) samples and report per-class IoU and mIoU.

    Unreadable samples are skipped and listed. Wall time is reported under
    ``timing`` so the rest of the report stays byte-reproducible.
    """
    if sample_limit is not None and sample_limit < 0:
        raise ValueError("sample_limit must be non-negative")
    dataset = dataset or Dataset(dataset_cfg)
    cfg = _effective_config(pipeline_cfg, dataset_cfg)
    classes = dataset.class_names
    provider = provider or make_provider(cfg.provider, cfg, classes)
    setup = build_classes(provider, classes, cfg, dataset_cfg.background_index, dataset_cfg.name)

    acc = ConfusionAccumulator(len(classes))
    skipped: list[dict[str, str]] = []
    samples = dataset.samples if sample_limit is None else dataset.samples[:sample_limit]
    start = time.perf_counter()
    for sample in samples:
        try:
            image, gt = dataset.load(sample)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: %s", sample.name, exc)
            skipped.append({"sample": sample.name, "error": str(exc)})
            continue
        result = segment_image(image, provider, setup, cfg, gt=gt, ignore_value=dataset_cfg.ignore_value)
        update(acc, result.seg.labels, gt, dataset_cfg.ignore_value)
    elapsed = time.perf_counter() - start

    score = miou(acc)
    ious = acc.iou()
    return {
        "dataset": dataset_cfg.name,
        "samples": acc.images,
        "skipped": skipped,
        "miou": score,
        "per_class_iou": {name: (None if np.isnan(v) else float(v)) for name, v in zip(classes, ious)},
        "config": cfg.to_dict(),
        "dataset_config": dataset_cfg.to_dict(),
        "timing": {"wall_time_s": elapsed},
    }


ABLATION_COMPONENTS = ("sr", "vr", "mc", "nc")


def ablation_configs(base: PipelineConfig, components: list[str]) -> list[tuple[str, PipelineConfig]]:
    """Cumulative rows: everything listed off, then switched on one at a time."""
    for c in components:
        if c not in ABLATION_COMPONENTS:
            raise ValueError(f"unknown ablation component {c!r}; choose from {ABLATION_COMPONENTS}")
    rows = []
    state = {c: False for c in components}
    rows.append(("baseline", base.replace(**state)))
    for c in components:
        state[c] = True
        rows.append(("+".join(k for k in components if state[k]), base.replace(**state)))
    return rows


def run_ablation(
    dataset_cfg: DatasetConfig,
    pipeline_cfg: PipelineConfig,
    components: list[str],
    sample_limit: int | None = None,
    provider: Provider | None = None,
) -> dict[str, Any]:
    dataset = Dataset(dataset_cfg)
    if provider is None:
        provider = make_provider(pipeline_cfg.provider, pipeline_cfg, dataset.class_names)
    rows = []
    for label, cfg in ablation_configs(pipeline_cfg, components):
        report = run_benchmark(dataset_cfg, cfg, sample_limit, provider, dataset)
        rows.append({"row": label, **{c: getattr(cfg, c) for c in ABLATION_COMPONENTS}, "report": report})
    return {"dataset": dataset_cfg.name, "components": components, "rows": rows}


def strip_timing(report: dict[str, Any]) -> tuple[dict[str, Any], dict[str, Any]]:
    """Split wall-clock fields out so the remainder is reproducible."""
    report = json.loads(json.dumps(report))
    timing: dict[str, Any] = {}
    if "timing" in report:
        timing = report.pop("timing")
    for row in report.get("rows", []):
        timing[row["row"]] = row["report"].pop("timing", {})
    return report, timing


def format_table(report: dict[str, Any]) -> str:
    """Plain-text rendering of a benchmark or ablation report."""
    lines: list[str] = []
    if "rows" in report:
        header = "  ".join(f"{c.upper():>3}" for c in ABLATION_COMPONENTS) + f"  {'mIoU':>6}"
        lines += [f"dataset: {report['dataset']}", header, "-" * len(header)]
        for row in report["rows"]:
            marks = "  ".join(f"{'x' if row[c] else '':>3}" for c in ABLATION_COMPONENTS)
            lines.append(f"{marks}  {100 * row['report']['miou']:6.2f}")
        return "\n".join(lines) + "\n"
    lines.append(f"dataset: {report['dataset']}  samples: {report['samples']}  skipped: {len(report['skipped'])}")
    width = max([len(n) for n in report["per_class_iou"]] + [5])
    for name, v in report["per_class_iou"].items():
        lines.append(f"{name:<{width}}  {'-' if v is None else f'{100 * v:6.2f}'}")
    lines.append(f"{'mIoU':<{width}}  {100 * report['miou']:6.2f}")
    return "\n".join(lines) + "\n"


def iter_predictions(dataset: Dataset, provider: Provider, cfg: PipelineConfig) -> Iterator[tuple[Sample, np.ndarray]]:
    setup = build_classes(provider, dataset.class_names, cfg, dataset.cfg.background_index, dataset.cfg.name)
    for sample in dataset.samples:
        image, gt = dataset.load(sample)
        yield sample, segment_image(image, provider, setup, cfg, gt=gt, ignore_value=dataset.cfg.ignore_value).seg.labels
