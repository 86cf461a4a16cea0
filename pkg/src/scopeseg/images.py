"""Image and label-map file IO, palette and overlay rendering."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, PngImagePlugin

CONFIG_CHUNK = "scopeseg-config"


def read_image(path: str | Path) -> np.ndarray:
    """RGB uint8 array; raises OSError for missing or undecodable files."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB")).copy()
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


def read_label_map(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("P", "L", "I", "I;16"):
            im = im.convert("L")
        return np.asarray(im).astype(np.int64)


def palette(n: int) -> np.ndarray:
    """The usual bit-interleaved segmentation palette (index 0 is black)."""
    out = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        c, r, g, b = i, 0, 0, 0
        for shift in range(7, -1, -1):
            r |= (c & 1) << shift
            g |= ((c >> 1) & 1) << shift
            b |= ((c >> 2) & 1) << shift
            c >>= 3
        out[i] = (r, g, b)
    return out


def label_png(labels: np.ndarray, info: dict[str, Any] | None = None) -> tuple[Image.Image, PngImagePlugin.PngInfo]:
    """Palettised 8-bit label image plus a text chunk carrying ``info`` as JSON."""
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 255):
        raise ValueError("label values must fit in 8 bits")
    im = Image.fromarray(labels.astype(np.uint8), mode="P")
    im.putpalette(palette(256).ravel().tolist())
    meta = PngImagePlugin.PngInfo()
    if info is not None:
        meta.add_text(CONFIG_CHUNK, json.dumps(info, sort_keys=True))
    return im, meta


def overlay(image: np.ndarray, labels: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    colours = palette(int(labels.max()) + 1 if labels.size else 1)[labels]
    blend = (1.0 - alpha) * image.astype(np.float64) + alpha * colours.astype(np.float64)
    return np.clip(np.rint(blend), 0, 255).astype(np.uint8)


def read_png_info(path: str | Path) -> dict[str, Any] | None:
    with Image.open(path) as im:
        text = im.info.get(CONFIG_CHUNK)
    return json.loads(text) if text else None
