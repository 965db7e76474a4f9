"""Raw little-endian tensor blobs with a JSON sidecar manifest.

Layout: ``<stem>.bin`` holds the tensors back to back; ``<stem>.json``
lists ``{name, dtype, shape, offset, nbytes}`` for each of them.
"""
import json
import os
from pathlib import Path

import numpy as np

FORMAT = "mls-tensors/1"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8", "uint64": "<u8", "uint8": "u1"}


def save_tensors(stem, tensors):
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    tmp_bin = stem.with_suffix(".bin.tmp")
    with open(tmp_bin, "wb") as f:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            dname = arr.dtype.name
            if dname not in _DTYPES:
                raise TypeError(f"{name}: unsupported dtype {dname}")
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[dname]).tobytes()
            f.write(raw)
            entries.append({"name": name, "dtype": dname, "shape": list(arr.shape),
                            "offset": offset, "nbytes": len(raw)})
            offset += len(raw)
    manifest = {"format": FORMAT, "byte_order": "little", "blob": stem.name + ".bin",
                "tensors": entries}
    tmp_json = stem.with_suffix(".json.tmp")
    tmp_json.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp_bin, stem.with_suffix(".bin"))
    os.replace(tmp_json, stem.with_suffix(".json"))


def load_tensors(stem):
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unknown tensor format {manifest.get('format')!r}")
    raw = stem.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"])
        out[e["name"]] = arr.astype(e["dtype"], copy=True)
    return out
