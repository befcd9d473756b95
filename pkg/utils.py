# utils.py - Shared helpers (errors, seeds, hashing, JSON artifacts)
from __future__ import annotations
import hashlib
import json
import os
from typing import Any, Dict, Iterable, Iterator, List

import numpy as np


# ========== ERRORS ==========
class LabError(Exception):
    """Base error for every pipeline stage. `exit_code` is what the CLI returns."""
    exit_code = 1


class MissingInputError(LabError):
    exit_code = 2


class ConfigError(LabError):
    exit_code = 3


class NumericError(LabError):
    """Non-finite loss or gradient."""
    exit_code = 4


class DimensionError(LabError):
    exit_code = 1


class IntegrityError(LabError):
    """Artifacts that do not belong together (vocab hash, base checkpoint hash)."""
    exit_code = 1


class LoraError(LabError):
    exit_code = 1


class EncodingError(LabError):
    exit_code = 1


# ========== SEEDS ==========
def stage_seed(global_seed: int, stage: str, counter: int = 0) -> int:
    """
    Derive a per-stage seed from the global seed.
    seed = first 8 bytes (little-endian) of sha256("{global_seed}:{stage}:{counter}"),
    masked to 63 bits so numpy accepts it.
    E.g., stage_seed(1, "split") is stable across runs and platforms.
    """
    digest = hashlib.sha256(f"{global_seed}:{stage}:{counter}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def rng_for(*key: int) -> np.random.Generator:
    """Counter-based generator: the same key always yields the same stream."""
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in key])


# ========== HASHING ==========
def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_arrays(arrays: Dict[str, np.ndarray]) -> str:
    """Hash named arrays in name order (name, dtype, shape and raw bytes)."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        h.update(name.encode("utf-8"))
        h.update(str(arr.dtype).encode("ascii"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


# ========== JSON ARTIFACTS ==========
def ensure_dir(path: str) -> str:
    os.makedirs(path, exist_ok=True)
    return path


def _default(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def dumps(obj: Any) -> str:
    """Deterministic JSON (sorted keys) so identical runs give identical bytes."""
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, default=_default)


def write_json(path: str, obj: Any) -> None:
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, ensure_ascii=False, sort_keys=True, indent=2, default=_default))
        f.write("\n")


def read_json(path: str) -> Any:
    if not os.path.exists(path):
        raise MissingInputError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_jsonl(path: str, records: Iterable[Dict[str, Any]]) -> None:
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(dumps(rec))
            f.write("\n")


def read_jsonl(path: str) -> List[Dict[str, Any]]:
    if not os.path.exists(path):
        raise MissingInputError(f"File not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def require_file(path: str) -> str:
    if not path or not os.path.exists(path):
        raise MissingInputError(f"File not found: {path}")
    return path


def iter_lines(path: str) -> Iterator[bytes]:
    """Raw lines without the trailing newline; decoding is the caller's job."""
    require_file(path)
    with open(path, "rb") as f:
        for raw in f:
            yield raw.rstrip(b"\r\n")
