"""Self-describing tensor container: a text manifest (name, dtype, shape,
byte offset) followed by a raw little-endian payload. Round trips are
bit-exact; checkpoints and parameter files share this format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"SEMISTEREO-TENSORS v1"
_SEP = b"\n---\n"


def save_arrays(path, arrays: dict, meta: dict | None = None):
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        raw = arr.astype(dt, copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": np.dtype(dt).str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {"meta": meta or {}, "tensors": entries, "payload_nbytes": offset}
    blob = MAGIC + b"\n" + json.dumps(manifest, sort_keys=True).encode("utf-8") + _SEP + b"".join(chunks)
    Path(path).write_bytes(blob)


def load_arrays(path):
    """Returns (arrays dict, meta dict). Truncated or foreign files raise
    CheckpointError before any partial state escapes."""
    blob = Path(path).read_bytes()
    head, nl, rest = blob.partition(b"\n")
    if head != MAGIC or not nl:
        raise CheckpointError(f"{path}: not a tensor container or version mismatch (got {head[:40]!r})")
    man_raw, sep, payload = rest.partition(_SEP)
    if not sep:
        raise CheckpointError(f"{path}: missing manifest/payload separator")
    try:
        manifest = json.loads(man_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: bad manifest: {e}") from e
    if len(payload) != manifest["payload_nbytes"]:
        raise CheckpointError(
            f"{path}: payload has {len(payload)} bytes, manifest says {manifest['payload_nbytes']}"
        )
    arrays = {}
    for ent in manifest["tensors"]:
        n = ent["nbytes"]
        off = ent["offset"]
        arr = np.frombuffer(payload[off : off + n], dtype=np.dtype(ent["dtype"]))
        arrays[ent["name"]] = arr.reshape(ent["shape"]).copy()
    return arrays, manifest["meta"]
