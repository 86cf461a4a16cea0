"""Post-hoc corrections: region-mode relabelling and class-name expansion."""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .masks import RegionMaskSet

if TYPE_CHECKING:
    from .segmentation import SegmentationMap


def mode_correct(seg: SegmentationMap, mask_set: RegionMaskSet) -> SegmentationMap:
    """Give every pixel of each segmented region that region's most common label.

    Ties resolve to the lowest class index. Unsegmented pixels and the
    logits are left alone.
    """
    regions = mask_set.pixel_labels
    if regions.shape != seg.labels.shape:
        raise ValueError(f"mask set {regions.shape} and label map {seg.labels.shape} differ in size")
    z = mask_set.z
    if z == 0:
        return replace(seg, labels=seg.labels.copy(), corrected=True)
    k = max(seg.num_classes, int(seg.labels.max(initial=0)) + 1)
    inside = regions >= 0
    hist = np.bincount(
        regions[inside].astype(np.int64) * k + seg.labels[inside], minlength=z * k
    ).reshape(z, k)
    modal = np.argmax(hist, axis=1)
    labels = seg.labels.copy()
    labels[inside] = modal[regions[inside]]
    return replace(seg, labels=labels, corrected=True)


@dataclass
class ExpandedClasses:
    """Classifier rows after name correction, with the map back to original classes."""

    class_names: list[str]
    name_variants: list[list[str]]
    fold_map: np.ndarray
    num_original: int
    background_index: int | None = None

    def fold(self, labels: np.ndarray) -> np.ndarray:
        return self.fold_map[labels]

    def fold_logits(self, logits: np.ndarray, axis: int = 0) -> np.ndarray:
        """Max-reduce expanded-row logits onto the original classes."""
        logits = np.moveaxis(np.asarray(logits), axis, 0)
        out = np.full((self.num_original,) + logits.shape[1:], -np.inf)
        for row, target in enumerate(self.fold_map.tolist()):
            np.maximum(out[target], logits[row], out=out[target])
        return np.moveaxis(out, 0, axis)


def expand_class_names(
    classes: list[str],
    plural_map: dict[str, list[str]] | None = None,
    background_subclasses: list[str] | None = None,
    background_enabled: bool = False,
    background_index: int | None = None,
) -> ExpandedClasses:
    """Attach plural variants and swap a background class for concrete subclasses.

    Only names listed in ``plural_map`` gain variants. With
    ``background_enabled`` the background row (``background_index``, or the
    class literally named "background") is replaced in place by one row per
    subclass, each folding back to the background index.
    """
    if len(set(classes)) != len(classes):
        raise ValueError("canonical class names must be unique")
    plural_map = plural_map or {}
    if background_index is None and "background" in classes:
        background_index = classes.index("background")

    names: list[str] = []
    variants: list[list[str]] = []
    fold: list[int] = []
    for idx, name in enumerate(classes):
        if background_enabled and idx == background_index and background_subclasses:
            for sub in background_subclasses:
                names.append(sub)
                variants.append([sub] + list(plural_map.get(sub, [])))
                fold.append(idx)
            continue
        names.append(name)
        variants.append([name] + list(plural_map.get(name, [])))
        fold.append(idx)

    seen: set[str] = set()
    for row in variants:
        for v in row:
            if v in seen:
                raise ValueError(f"name {v!r} appears more than once after expansion")
            seen.add(v)
    return ExpandedClasses(names, variants, np.array(fold, dtype=np.int64), len(classes), background_index)


def _packaged_json(name: str) -> dict:
    text = resources.files("scopeseg").joinpath("data", name).read_text(encoding="utf-8")
    return {k: v for k, v in json.loads(text).items() if not k.startswith("_")}


def load_plural_map(spec: str | dict[str, list[str]] | None) -> dict[str, list[str]]:
    """``None`` gives the packaged default, ``"none"`` an empty map, else a dict or JSON path."""
    if spec is None:
        return _packaged_json("plural_map.json")
    if isinstance(spec, dict):
        return {k: list(v) for k, v in spec.items()}
    if spec == "none":
        return {}
    data = json.loads(Path(spec).read_text(encoding="utf-8"))
    return {k: list(v) for k, v in data.items() if not k.startswith("_")}


def load_background_subclasses(spec: str | list[str] | None, dataset: str | None = None) -> list[str]:
    """Resolve a subclass list from a list, a JSON file, a packaged key, or the default."""
    if isinstance(spec, list):
        return list(spec)
    packaged = _packaged_json("background_subclasses.json")
    if spec is None:
        return list(packaged.get(dataset or "default", packaged["default"]))
    if spec in packaged:
        return list(packaged[spec])
    data = json.loads(Path(spec).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = data.get(dataset or "default", data.get("default"))
    if not isinstance(data, list):
        raise ValueError(f"{spec}: expected a list of subclass names")
    return [str(x) for x in data]
