"""Single-file blob of named arrays with a plain-text header.

Layout::

    DISTILL3D-BLOB\\n
    <header: one line of JSON>\\n
    <payload: raw little-endian array bytes, concatenated>

The header holds ``format_version``, free-form ``meta``, the SHA-256 of
the payload and, for every array, its name, dtype, shape, byte offset and
byte length.  A reader rejects an unknown magic line, a different
``format_version`` and any payload whose digest does not match.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"DISTILL3D-BLOB\n"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        return value.detach().cpu().contiguous().numpy()
    return np.ascontiguousarray(value)


def write_blob(path, arrays: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = _to_numpy(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
        "arrays": entries,
    }
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(line + b"\n")
        fh.write(payload)
    tmp.replace(path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.readline() != MAGIC:
            raise CheckpointError(f"{path}: not a distill3d checkpoint")
        try:
            return json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: corrupt header") from exc


def read_blob(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a distill3d checkpoint")
    end = data.find(b"\n", len(MAGIC))
    if end < 0:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[len(MAGIC) : end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {header.get('format_version')} != supported {FORMAT_VERSION}"
        )
    payload = data[end + 1 :]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: payload digest mismatch (corrupt or truncated file)")
    arrays = {}
    for e in header["arrays"]:
        raw = payload[e["offset"] : e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def flatten_state_dict(prefix: str, state: dict) -> dict[str, np.ndarray]:
    return {f"{prefix}/{k}": _to_numpy(v) for k, v in state.items()}


def unflatten_state_dict(prefix: str, arrays: dict) -> dict[str, torch.Tensor]:
    p = prefix + "/"
    return {k[len(p) :]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(p)}


def optimizer_to_arrays(prefix: str, optimizer: torch.optim.Optimizer) -> tuple[dict, dict]:
    """Split an optimizer state dict into arrays and JSON metadata."""
    sd = optimizer.state_dict()
    arrays, keys = {}, {}
    for idx, st in sd["state"].items():
        keys[str(idx)] = {}
        for k, v in st.items():
            if isinstance(v, torch.Tensor):
                arrays[f"{prefix}/{idx}/{k}"] = _to_numpy(v).copy()
                keys[str(idx)][k] = "tensor"
            else:
                keys[str(idx)][k] = v
    return arrays, {"param_groups": sd["param_groups"], "state": keys}


def optimizer_from_arrays(prefix: str, optimizer: torch.optim.Optimizer, arrays: dict, meta: dict) -> None:
    state = {}
    for idx, st in meta["state"].items():
        state[int(idx)] = {
            k: torch.from_numpy(arrays[f"{prefix}/{idx}/{k}"].copy()) if v == "tensor" else v for k, v in st.items()
        }
    optimizer.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
