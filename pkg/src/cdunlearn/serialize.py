"""Versioned binary container for named float64 arrays (model checkpoints,
importance maps).

Layout, all little-endian:

    bytes 0..7    magic ``b"CDUN0001"``
    bytes 8..11   uint32 header length H
    bytes 12..12+H  UTF-8 JSON header::

        {"format_version": 1,
         "meta": {...},                        # caller-supplied, JSON-safe
         "arrays": [{"name": str, "shape": [int, ...]}, ...]}

    then, for each entry of ``arrays`` in order, the raw C-order float64
    little-endian bytes of that array.

Writes are deterministic (sorted JSON keys, no timestamps), so identical
content produces identical files, and a save/load round trip is bit-exact.
"""

from __future__ import annotations

import json
from typing import Mapping

import numpy as np

MAGIC = b"CDUN0001"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    """The file is not a valid container or is from an unknown version."""


def save_bundle(path: str, arrays: Mapping[str, np.ndarray], meta: dict) -> None:
    names = list(arrays)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta,
        "arrays": [
            {"name": n, "shape": list(np.asarray(arrays[n]).shape)} for n in names
        ],
    }
    payload = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array([len(payload)], dtype="<u4").tobytes())
        f.write(payload)
        for n in names:
            arr = np.ascontiguousarray(np.asarray(arrays[n], dtype=np.float64))
            f.write(arr.astype("<f8", copy=False).tobytes())


def load_bundle(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        (hlen,) = np.frombuffer(f.read(4), dtype="<u4")
        header = json.loads(f.read(int(hlen)).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ContainerError(
                f"{path}: unsupported format_version {header.get('format_version')}"
            )
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ContainerError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = (
                np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
            )
    return arrays, header["meta"]
