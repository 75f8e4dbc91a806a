"""Parameter checkpoints: one little-endian float64 blob plus a JSON manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_arrays(path, arrays: dict[str, np.ndarray], extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(a.tobytes())
            entries.append({"name": name, "shape": list(a.shape), "offset": offset})
            offset += a.size
    manifest = {"format": "f64-le", "n_values": offset, "params": entries}
    if extra:
        manifest.update(extra)
    manifest_path = path.with_suffix(path.suffix + ".json")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest_path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    blob = np.fromfile(path, dtype="<f8")
    if blob.size != manifest["n_values"]:
        raise ValueError(f"{path}: expected {manifest['n_values']} values, found {blob.size}")
    arrays = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = blob[e["offset"]:e["offset"] + n].reshape(e["shape"]).astype(np.float64)
    return arrays, manifest
