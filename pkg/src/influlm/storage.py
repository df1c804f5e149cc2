"""Deterministic on-disk containers and content hashing.

Artifacts are written as a single file: a magic line, one line of canonical
JSON metadata describing every array, then the raw little-endian array bytes.
Identical inputs always give identical bytes, which the pipeline relies on for
its content-addressed caching.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"INFLULM-ARRAYS\n"
FORMAT_VERSION = 1


class StorageError(ValueError):
    pass


def canonical_json(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_arrays(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_arrays(path: str | Path, kind: str, meta: Mapping[str, Any],
                arrays: Mapping[str, np.ndarray]) -> str:
    """Write ``arrays`` plus ``meta`` to ``path``; returns the file's sha256."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"kind": kind, "version": FORMAT_VERSION, "meta": dict(meta), "arrays": entries}
    payload = MAGIC + canonical_json(header) + b"\n" + b"".join(blobs)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(path)
    return sha256_bytes(payload)


def load_arrays(path: str | Path, kind: str) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise StorageError(f"{path}: not an influlm array container")
    rest = data[len(MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    if header.get("kind") != kind:
        raise StorageError(f"{path}: expected a {kind!r} file, found {header.get('kind')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise StorageError(f"{path}: unsupported format version {header.get('version')}")
    body = rest[nl + 1:]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).copy()
    return header["meta"], arrays


def write_jsonl(path: str | Path, rows) -> str:
    lines = [json.dumps(r, sort_keys=True, allow_nan=False) for r in rows]
    payload = ("\n".join(lines) + ("\n" if lines else "")).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
    return sha256_bytes(payload)


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
