# checkpoint.py - Deterministic checkpoint container
# A zip archive with a JSON manifest plus one little-endian float32 .npy entry per array.
from __future__ import annotations
import io
import json
import os
import zipfile
from typing import Any, Dict, Tuple

import numpy as np

from utils import IntegrityError, MissingInputError, dumps, ensure_dir, hash_arrays

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype="<f4"), allow_pickle=False)
    return buf.getvalue()


def save(path: str, arrays: Dict[str, np.ndarray], manifest: Dict[str, Any]) -> str:
    """
    Write arrays + manifest. Identical inputs give byte-identical files.
    Returns the parameter hash stored in the manifest.
    """
    parent = os.path.dirname(path)
    if parent:
        ensure_dir(parent)
    stored = {k: np.ascontiguousarray(v, dtype="<f4") for k, v in arrays.items()}
    meta = dict(manifest)
    meta["format_version"] = FORMAT_VERSION
    meta["array_hash"] = hash_arrays(stored)
    meta["arrays"] = sorted(stored)
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry(MANIFEST), dumps(meta).encode("utf-8"))
        for name in sorted(stored):
            zf.writestr(_entry(f"arrays/{name}.npy"), _npy_bytes(stored[name]))
    return meta["array_hash"]


def load(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise MissingInputError(f"Checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path, "r") as zf:
            manifest = json.loads(zf.read(MANIFEST).decode("utf-8"))
            arrays = {}
            for name in manifest.get("arrays", []):
                with zf.open(f"arrays/{name}.npy") as f:
                    arrays[name] = np.lib.format.read_array(io.BytesIO(f.read()), allow_pickle=False)
    except (zipfile.BadZipFile, KeyError) as e:
        raise IntegrityError(f"Corrupt checkpoint {path}: {e}") from e
    if manifest.get("format_version") != FORMAT_VERSION:
        raise IntegrityError(f"Unsupported checkpoint format {manifest.get('format_version')}")
    if hash_arrays(arrays) != manifest.get("array_hash"):
        raise IntegrityError(f"Checkpoint arrays do not match their manifest hash: {path}")
    return manifest, arrays


def read_manifest(path: str) -> Dict[str, Any]:
    return load(path)[0]
