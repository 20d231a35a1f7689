"""Binary checkpoints storing only the kept rows/columns of each weight matrix.

Layout (little-endian)::

    magic        4 bytes   b"PPCK"
    version      uint16    FORMAT_VERSION
    reserved     uint16    0
    header_len   uint32
    header       header_len bytes of UTF-8 JSON (sorted keys, compact)
    payload      float32 blocks referenced by header offsets

The header lists, per prunable layer, its id, kind, full shape, row/column
keep bits (``"1101..."``), and the byte offset/length of the kept-rows x
kept-cols block in row-major order.  Biases are stored in full.  ``meta``
holds the seed, epoch count, stage, and config hashes.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..model_engine import Model, format_architecture, parse_architecture
from ..pruning_pipeline import SparsityMask, compact_weights
from ..tensor_core import WeightCollection

MAGIC = b"PPCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _bits(keep: np.ndarray) -> str:
    return "".join("1" if k else "0" for k in keep)


def _unbits(s: str) -> np.ndarray:
    if set(s) - {"0", "1"}:
        raise CheckpointError("keep vectors must be strings of 0/1")
    return np.array([c == "1" for c in s], dtype=bool)


def encode(model: Model, meta: dict) -> bytes:
    mask = model.mask or SparsityMask.all_keep(model.weights)
    packed = compact_weights(model, mask)
    blobs, layers, biases = [], [], []
    offset = 0
    for lid, s in model.prunable_layers():
        _, _, wc = packed[lid]
        data = wc.astype("<f4").tobytes()
        layers.append({
            "id": lid, "kind": s.kind, "shape": list(model.weights[lid].shape),
            "row_keep": _bits(mask.row_keep[lid]), "col_keep": _bits(mask.col_keep[lid]),
            "offset": offset, "nbytes": len(data),
        })
        blobs.append(data)
        offset += len(data)
    for lid, b in model.biases.items():
        data = b.astype("<f4").tobytes()
        biases.append({"id": lid, "length": int(b.size), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": FORMAT_VERSION,
        "architecture": format_architecture(model.specs),
        "input_shape": list(model.input_shape),
        "layers": layers,
        "biases": biases,
        "meta": meta,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<HHI", FORMAT_VERSION, 0, len(hb)) + hb + b"".join(blobs)


def decode(buf: bytes) -> tuple[Model, dict]:
    """Inverse of :func:`encode`; dropped rows/columns come back as zeros."""
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, _, hlen = struct.unpack("<HHI", buf[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[12:12 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt header: {err}") from err
    payload = buf[12 + hlen:]

    def block(rec, count):
        if rec["nbytes"] != 4 * count:
            raise CheckpointError(f"{rec['id']}: {rec['nbytes']} bytes declared for {count} values")
        end = rec["offset"] + rec["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{rec['id']}: payload truncated")
        return np.frombuffer(payload[rec["offset"]:end], dtype="<f4").astype(np.float64)

    weights, rows, cols = [], {}, {}
    for rec in header["layers"]:
        r, c = rec["shape"]
        rk, ck = _unbits(rec["row_keep"]), _unbits(rec["col_keep"])
        if rk.size != r or ck.size != c:
            raise CheckpointError(f"{rec['id']}: keep vectors do not match shape {r}x{c}")
        kept = block(rec, int(rk.sum()) * int(ck.sum())).reshape(int(rk.sum()), int(ck.sum()))
        full = np.zeros((r, c))
        full[np.ix_(rk, ck)] = kept
        weights.append((rec["id"], full))
        rows[rec["id"]], cols[rec["id"]] = rk, ck
    biases = {rec["id"]: block(rec, rec["length"]) for rec in header["biases"]}
    used = sum(rec["nbytes"] for rec in header["layers"] + header["biases"])
    if used != len(payload):
        raise CheckpointError(f"payload has {len(payload)} bytes, header accounts for {used}")
    try:
        model = Model(parse_architecture(header["architecture"]), header["input_shape"],
                      weights=WeightCollection(weights), biases=biases)
    except ValueError as err:
        raise CheckpointError(str(err)) from err
    if not all(v.all() for v in rows.values()) or not all(v.all() for v in cols.values()):
        model.mask = SparsityMask(rows, cols)
    return model, header["meta"]


def save_checkpoint(path, model: Model, meta: dict) -> bytes:
    data = encode(model, meta)
    Path(path).write_bytes(data)
    return data


def load_checkpoint(path) -> tuple[Model, dict]:
    return decode(Path(path).read_bytes())
