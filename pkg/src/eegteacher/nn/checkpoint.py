"""Named-tensor archive: ``tensors.bin`` (raw little-endian float32) + ``manifest.json``.

The byte layout depends only on tensor names, shapes and values, so two
identical training runs produce byte-identical checkpoint directories.
"""
from __future__ import annotations

import json
import os

import numpy as np

TENSORS_FILE = "tensors.bin"
MANIFEST_FILE = "manifest.json"


def save_archive(path, tensors, meta=None):
    """Write ``tensors`` (name -> array) under directory ``path``.

    ``meta`` must be JSON-serialisable (config, rng state, step counters).
    """
    os.makedirs(path, exist_ok=True)
    entries = []
    offset = 0
    with open(os.path.join(path, TENSORS_FILE), "wb") as fh:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f4"))
            fh.write(arr.tobytes())
            entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += arr.nbytes
    manifest = {"format": "named-f32-v1", "tensors": entries, "meta": meta or {}}
    with open(os.path.join(path, MANIFEST_FILE), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_archive(path):
    """Return (tensors, meta)."""
    with open(os.path.join(path, MANIFEST_FILE)) as fh:
        manifest = json.load(fh)
    raw = np.fromfile(os.path.join(path, TENSORS_FILE), dtype="<f4")
    tensors = {}
    for e in manifest["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"] // 4
        tensors[e["name"]] = raw[start:start + n].reshape(e["shape"]).astype(np.float32)
    return tensors, manifest["meta"]
