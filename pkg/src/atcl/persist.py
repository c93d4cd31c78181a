"""Checkpoints and per-epoch metric logs.

Checkpoint layout (little-endian)::

    8 bytes      b"ATCLCKPT"
    u32          format version (1)
    u32          number of layer dims L+1, then L+1 x u32 dims
    u32          number of optimizer buffer sets B (0 none, 1 SGD velocity, 2 Adam m/v)
    params       per layer: weight [in, out] row-major then bias, f32
    buffers      B x the parameter layout, f32
    u32 + bytes  JSON trainer state (epoch, best tracker, frozen flag, ...)
    u32, u32     cache rows n and classes K (0, 0 when absent), then n x K f64
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from atcl.nn import MlpModel

MAGIC = b"ATCLCKPT"
VERSION = 1

METRIC_FIELDS = (
    "epoch", "train_loss", "nat_acc", "pgd_acc", "eps_e", "alpha_e", "k_e", "gamma",
    "beta", "pl_acc", "grad_trace_first", "grad_norm_first", "grad_norm_last", "frozen",
)


class CheckpointError(ValueError):
    pass


def _pack_arrays(arrays) -> bytes:
    return b"".join(np.asarray(a, dtype="<f4").tobytes() for a in arrays)


def encode_checkpoint(model: MlpModel, buffers=(), state: dict | None = None,
                      cache: np.ndarray | None = None) -> bytes:
    dims = model.dims
    parts = [MAGIC, struct.pack("<II", VERSION, len(dims)), struct.pack(f"<{len(dims)}I", *dims)]
    parts.append(struct.pack("<I", len(buffers)))
    parts.append(_pack_arrays(p.data for p in model.parameters()))
    for buf in buffers:
        parts.append(_pack_arrays(buf))
    blob = json.dumps(state or {}, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(blob)) + blob)
    if cache is None:
        parts.append(struct.pack("<II", 0, 0))
    else:
        parts.append(struct.pack("<II", *cache.shape) + np.asarray(cache, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(raw: bytes, dtype=np.float32) -> dict:
    if raw[:8] != MAGIC:
        raise CheckpointError("not an ATCL checkpoint (bad magic)")
    off = 8
    try:
        version, ndims = struct.unpack_from("<II", raw, off)
        off += 8
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        dims = list(struct.unpack_from(f"<{ndims}I", raw, off))
        off += 4 * ndims
        (nbuf,) = struct.unpack_from("<I", raw, off)
        off += 4
        shapes = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            shapes.extend(((fan_in, fan_out), (fan_out,)))

        def read_set():
            nonlocal off
            out = []
            for shape in shapes:
                count = int(np.prod(shape))
                a = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
                out.append(a.astype(dtype))
                off += 4 * count
            return out

        params = read_set()
        buffers = [read_set() for _ in range(nbuf)]
        (blen,) = struct.unpack_from("<I", raw, off)
        off += 4
        state = json.loads(raw[off : off + blen].decode())
        off += blen
        rows, K = struct.unpack_from("<II", raw, off)
        off += 8
        cache = None
        if rows:
            cache = np.frombuffer(raw, dtype="<f8", count=rows * K, offset=off).reshape(rows, K).copy()
            off += 8 * rows * K
    except (struct.error, ValueError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"truncated or corrupt checkpoint: {exc}") from exc
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} trailing bytes after checkpoint")
    model = MlpModel(params[0::2], params[1::2])
    return {"model": model, "buffers": buffers, "state": state, "cache": cache}


def save_checkpoint(path, model, buffers=(), state=None, cache=None):
    Path(path).write_bytes(encode_checkpoint(model, buffers, state, cache))


def load_checkpoint(path, dtype=np.float32) -> dict:
    return decode_checkpoint(Path(path).read_bytes(), dtype)


class MetricsLog:
    """Per-epoch records, optionally streamed to a JSON-lines file."""

    def __init__(self, path=None, records=None):
        self.path = Path(path) if path is not None else None
        self.records: list = list(records or [])

    def append(self, record: dict):
        rec = {k: record.get(k) for k in METRIC_FIELDS}
        rec.update({k: v for k, v in record.items() if k not in rec})
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec, sort_keys=False) + "\n")

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def column(self, name: str) -> list:
        return [r.get(name) for r in self.records]

    def to_csv(self, path):
        extra = sorted({k for r in self.records for k in r} - set(METRIC_FIELDS))
        fields = list(METRIC_FIELDS) + extra
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=fields)
            w.writeheader()
            for r in self.records:
                w.writerow({k: r.get(k) for k in fields})

    @classmethod
    def read_jsonl(cls, path) -> "MetricsLog":
        with open(path) as f:
            return cls(records=[json.loads(line) for line in f if line.strip()])
