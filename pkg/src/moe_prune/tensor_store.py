"""Manifest-plus-blob archive format shared by every pipeline stage.

An archive is a pair of files: ``<path>.json`` holds a manifest (array
names, shapes, dtypes, byte ranges, and a free-form string metadata map)
and ``<path>.bin`` holds the raw little-endian values concatenated in
manifest order. The manifest is validated before any array data is
returned, so a truncated or inconsistent blob never yields partial
results. Identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

FORMAT_VERSION = 1

_DTYPES = {
    "f32": np.dtype("<f4"),
    "i32": np.dtype("<i4"),
}


class ArchiveError(ValueError):
    """A malformed archive or a violated manifest invariant."""


@dataclass(frozen=True)
class ArrayEntry:
    name: str
    shape: tuple[int, ...]
    dtype: str
    offset: int
    length: int


@dataclass
class Manifest:
    format_version: int = FORMAT_VERSION
    arrays: list[ArrayEntry] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def names(self) -> list[str]:
        return [entry.name for entry in self.arrays]

    def entry(self, name: str) -> ArrayEntry:
        for entry in self.arrays:
            if entry.name == name:
                return entry
        raise KeyError(name)

    def validate(self, blob_size: int) -> None:
        """Check every manifest invariant against a blob of `blob_size` bytes."""
        if self.format_version != FORMAT_VERSION:
            raise ArchiveError(
                f"unknown format_version {self.format_version!r} (expected {FORMAT_VERSION})"
            )
        seen: set[str] = set()
        for entry in self.arrays:
            if entry.name in seen:
                raise ArchiveError(f"duplicate array name {entry.name!r}")
            seen.add(entry.name)
            if entry.dtype not in _DTYPES:
                raise ArchiveError(f"array {entry.name!r}: unknown dtype {entry.dtype!r}")
            if any(int(dim) < 0 for dim in entry.shape):
                raise ArchiveError(f"array {entry.name!r}: negative dimension in {entry.shape}")
            expected = int(math.prod(entry.shape)) * _DTYPES[entry.dtype].itemsize
            if entry.length != expected:
                raise ArchiveError(
                    f"array {entry.name!r}: length {entry.length} != "
                    f"product(shape) * itemsize = {expected}"
                )
            if entry.offset < 0 or entry.offset + entry.length > blob_size:
                raise ArchiveError(
                    f"array {entry.name!r}: region [{entry.offset}, "
                    f"{entry.offset + entry.length}) outside blob of {blob_size} bytes"
                )
        ordered = sorted(self.arrays, key=lambda e: e.offset)
        for prev, cur in zip(ordered, ordered[1:]):
            if prev.offset + prev.length > cur.offset:
                raise ArchiveError(
                    f"array {cur.name!r}: region overlaps array {prev.name!r}"
                )

    def to_json(self) -> str:
        doc = {
            "format_version": self.format_version,
            "arrays": [
                {
                    "name": e.name,
                    "shape": list(e.shape),
                    "dtype": e.dtype,
                    "offset": e.offset,
                    "length": e.length,
                }
                for e in self.arrays
            ],
            "metadata": dict(self.metadata),
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ArchiveError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ArchiveError("manifest root must be an object")
        try:
            arrays = [
                ArrayEntry(
                    name=str(item["name"]),
                    shape=tuple(int(d) for d in item["shape"]),
                    dtype=str(item["dtype"]),
                    offset=int(item["offset"]),
                    length=int(item["length"]),
                )
                for item in doc["arrays"]
            ]
            return cls(
                format_version=int(doc["format_version"]),
                arrays=arrays,
                metadata={str(k): str(v) for k, v in doc.get("metadata", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ArchiveError(f"manifest missing or malformed field: {exc}") from exc


def _coerce(name: str, array: np.ndarray) -> tuple[np.ndarray, str]:
    arr = np.asarray(array)
    if arr.dtype.kind == "f":
        with np.errstate(over="ignore"):  # overflow to inf is caught just below
            out = np.ascontiguousarray(arr, dtype=_DTYPES["f32"])
        if not np.all(np.isfinite(out)):
            raise ArchiveError(f"array {name!r}: non-finite values are not storable")
        return out, "f32"
    if arr.dtype.kind in ("i", "u", "b"):
        info = np.iinfo(np.int32)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ArchiveError(f"array {name!r}: values out of i32 range")
        return np.ascontiguousarray(arr, dtype=_DTYPES["i32"]), "i32"
    raise ArchiveError(f"array {name!r}: unsupported dtype {arr.dtype}")


def write_archive(
    path: str | os.PathLike,
    arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    metadata: Mapping[str, str] | None = None,
) -> Manifest:
    """Write ``<path>.json`` + ``<path>.bin`` and return the manifest.

    Arrays are stored in the given order; floats as little-endian f32,
    integers as i32. Non-finite values are rejected up front.
    """
    pairs = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
    names = [name for name, _ in pairs]
    if len(set(names)) != len(names):
        dup = next(n for i, n in enumerate(names) if n in names[:i])
        raise ArchiveError(f"array name collision: {dup!r}")

    entries: list[ArrayEntry] = []
    chunks: list[bytes] = []
    offset = 0
    for name, array in pairs:
        data, dtype = _coerce(name, array)
        raw = data.tobytes(order="C")
        entries.append(ArrayEntry(name, tuple(data.shape), dtype, offset, len(raw)))
        chunks.append(raw)
        offset += len(raw)

    manifest = Manifest(
        arrays=entries,
        metadata={str(k): str(v) for k, v in (metadata or {}).items()},
    )
    manifest.validate(offset)

    path = os.fspath(path)
    with open(path + ".bin", "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    with open(path + ".json", "w", encoding="utf-8") as fh:
        fh.write(manifest.to_json())
    return manifest


def read_archive(path: str | os.PathLike) -> tuple[Manifest, dict[str, np.ndarray]]:
    """Read a manifest+blob pair; validates before reconstructing any array."""
    path = os.fspath(path)
    manifest_path, blob_path = path + ".json", path + ".bin"
    for required in (manifest_path, blob_path):
        if not os.path.exists(required):
            raise FileNotFoundError(f"archive file missing: {required}")

    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = Manifest.from_json(fh.read())
    blob_size = os.path.getsize(blob_path)
    manifest.validate(blob_size)

    with open(blob_path, "rb") as fh:
        blob = fh.read()

    out: dict[str, np.ndarray] = {}
    for entry in manifest.arrays:
        raw = blob[entry.offset : entry.offset + entry.length]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry.dtype]).reshape(entry.shape)
        out[entry.name] = arr.copy()
    return manifest, out
