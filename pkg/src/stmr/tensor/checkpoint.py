"""Binary tensor records with a JSON index.

A checkpoint is a directory holding ``tensors.bin`` (raw little-endian
arrays, concatenated) and ``index.json`` listing each record's name, shape,
dtype and byte range, plus free-form metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


def save_records(directory, records: dict, meta: dict | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for name, arr in records.items():
        arr = np.asarray(arr)
        if arr.dtype.kind == "f":
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        else:
            le = arr.astype("<i8")
        raw = np.ascontiguousarray(le).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str,
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (d / "tensors.bin").write_bytes(b"".join(chunks))
    doc = {"format_version": FORMAT_VERSION, "records": index, "meta": meta or {}}
    (d / "index.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_records(directory) -> tuple[dict, dict]:
    d = Path(directory)
    doc = json.loads((d / "index.json").read_text())
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {doc.get('format_version')}")
    buf = (d / "tensors.bin").read_bytes()
    out = {}
    for rec in doc["records"]:
        arr = np.frombuffer(buf, dtype=np.dtype(rec["dtype"]), count=int(np.prod(rec["shape"], dtype=np.int64)),
                            offset=rec["offset"])
        out[rec["name"]] = arr.reshape(rec["shape"]).astype(np.dtype(rec["dtype"]).newbyteorder("="))
    return out, doc["meta"]
