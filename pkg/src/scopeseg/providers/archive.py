"""Fixture archive: named tensors in one little-endian blob plus a JSON manifest.

Layout of an archive directory::

    manifest.json   {"format": "scopeseg-fixture", "version": 1,
                     "meta": {...},
                     "tensors": [{"name", "shape", "dtype", "file",
                                  "byte_offset", "meta"?}, ...]}
    tensors.bin     row-major little-endian data, concatenated

``dtype`` is one of ``f32``, ``u8`` or ``i32``.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import jsonschema
import numpy as np

FORMAT = "scopeseg-fixture"
VERSION = 1
BLOB_FILE = "tensors.bin"

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "i32": np.dtype("<i4")}

MANIFEST_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["format", "version", "tensors"],
    "properties": {
        "format": {"const": FORMAT},
        "version": {"const": VERSION},
        "meta": {"type": "object"},
        "tensors": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["name", "shape", "dtype", "file", "byte_offset"],
                "properties": {
                    "name": {"type": "string", "minLength": 1},
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "dtype": {"enum": sorted(DTYPES)},
                    "file": {"type": "string", "minLength": 1},
                    "byte_offset": {"type": "integer", "minimum": 0},
                    "meta": {"type": "object"},
                },
                "additionalProperties": False,
            },
        },
    },
}


class ArchiveError(ValueError):
    pass


def validate_manifest(manifest: dict[str, Any]) -> None:
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ArchiveError(f"invalid fixture manifest: {exc.message}") from exc
    names = [t["name"] for t in manifest["tensors"]]
    if len(names) != len(set(names)):
        raise ArchiveError("duplicate tensor names in manifest")


class TensorArchive:
    def __init__(self, meta: dict[str, Any] | None = None):
        self.meta: dict[str, Any] = dict(meta or {})
        self._tensors: dict[str, tuple[str, np.ndarray]] = {}
        self._tensor_meta: dict[str, dict[str, Any]] = {}

    def put(self, name: str, array: np.ndarray, dtype: str = "f32", meta: dict[str, Any] | None = None) -> None:
        if dtype not in DTYPES:
            raise ArchiveError(f"unsupported dtype {dtype!r}")
        arr = np.ascontiguousarray(np.asarray(array).astype(DTYPES[dtype], copy=False))
        self._tensors[name] = (dtype, arr)
        if meta:
            self._tensor_meta[name] = dict(meta)

    def get(self, name: str) -> np.ndarray:
        try:
            return self._tensors[name][1]
        except KeyError:
            raise KeyError(f"fixture archive has no tensor {name!r}") from None

    def tensor_meta(self, name: str) -> dict[str, Any]:
        return self._tensor_meta.get(name, {})

    def __contains__(self, name: object) -> bool:
        return name in self._tensors

    def names(self, prefix: str = "") -> list[str]:
        return sorted(n for n in self._tensors if n.startswith(prefix))

    def manifest(self) -> dict[str, Any]:
        entries = []
        offset = 0
        for name in sorted(self._tensors):
            dtype, arr = self._tensors[name]
            entry = {
                "name": name,
                "shape": list(arr.shape),
                "dtype": dtype,
                "file": BLOB_FILE,
                "byte_offset": offset,
            }
            if name in self._tensor_meta:
                entry["meta"] = self._tensor_meta[name]
            entries.append(entry)
            offset += arr.nbytes
        return {"format": FORMAT, "version": VERSION, "meta": self.meta, "tensors": entries}

    def save(self, directory: str | Path, force: bool = False) -> Path:
        directory = Path(directory)
        if directory.exists() and any(directory.iterdir()) and not force:
            raise FileExistsError(f"{directory} exists and is not empty (use --force to overwrite)")
        directory.mkdir(parents=True, exist_ok=True)
        manifest = self.manifest()
        validate_manifest(manifest)
        with open(directory / BLOB_FILE, "wb") as fh:
            for name in sorted(self._tensors):
                fh.write(self._tensors[name][1].tobytes(order="C"))
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> TensorArchive:
        directory = Path(directory)
        manifest_path = directory / "manifest.json"
        if not manifest_path.is_file():
            raise ArchiveError(f"no manifest.json in {directory}")
        manifest = json.loads(manifest_path.read_text())
        validate_manifest(manifest)
        archive = cls(manifest.get("meta"))
        blobs: dict[str, bytes] = {}
        for entry in manifest["tensors"]:
            fname = entry["file"]
            if fname not in blobs:
                blobs[fname] = (directory / fname).read_bytes()
            dtype = DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"], dtype=np.int64))
            start = entry["byte_offset"]
            end = start + count * dtype.itemsize
            if end > len(blobs[fname]):
                raise ArchiveError(f"tensor {entry['name']!r} runs past the end of {fname}")
            arr = np.frombuffer(blobs[fname], dtype=dtype, count=count, offset=start).reshape(entry["shape"])
            archive._tensors[entry["name"]] = (entry["dtype"], arr.copy())
            if "meta" in entry:
                archive._tensor_meta[entry["name"]] = entry["meta"]
        return archive
