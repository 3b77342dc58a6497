"""Single-file binary checkpoints.

Layout, all integers little-endian::

    magic    8 bytes  b"IDNSNET\\0"
    version  uint32
    blob_len uint32, then blob_len bytes of UTF-8 JSON
             {"config": RunConfig dict, "state": run state such as RNG streams}
    count    uint32
    count records of
        name_len uint16, name (UTF-8)
        rank     uint8
        dims     rank x uint64
        payload  prod(dims) float64 values, little-endian, C order

Record names:

* ``param/<name>``       every Parameter
* ``spectral_u/<path>``, ``spectral_v/<path>``, ``spectral_sigma/<path>``
  persistent power-iteration state of each SpectralWeight
* ``adam_m/<name>``, ``adam_v/<name>``, ``adam/step``, ``adam/hyper``
  optimizer state (``hyper`` holds lr, beta1, beta2, eps)
* ``iteration``          training iterations completed

Integers are stored as float64, which is exact below 2**53.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RunConfig
from .flow import build_model
from .lipschitz import SpectralWeight
from .optim import AdamState

MAGIC = b"IDNSNET\0"
VERSION = 1
_LE_F64 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    model: object
    adam: AdamState | None = None
    iteration: int = 0
    state: dict = field(default_factory=dict)


def _spectral(model):
    return [(path, m) for path, m in model.named_modules() if isinstance(m, SpectralWeight)]


def _records(model, adam, iteration):
    for name, p in model.named_parameters():
        yield f"param/{name}", p.data
    for path, w in _spectral(model):
        yield f"spectral_u/{path}", w.u
        yield f"spectral_v/{path}", w.v
        yield f"spectral_sigma/{path}", np.array(w.sigma)
    if adam is not None:
        for name in sorted(adam.m):
            yield f"adam_m/{name}", adam.m[name]
            yield f"adam_v/{name}", adam.v[name]
        yield "adam/step", np.array(float(adam.step))
        yield "adam/hyper", np.array([adam.lr, adam.beta1, adam.beta2, adam.eps])
    yield "iteration", np.array(float(iteration))


def encode(config, model, adam=None, iteration=0, state=None):
    blob = json.dumps({"config": config.to_dict(), "state": state or {}}, sort_keys=True).encode()
    records = list(_records(model, adam, iteration))
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(records))]
    for name, arr in records:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_LE_F64).tobytes())
    return b"".join(parts)


def save(path, config, model, adam=None, iteration=0, state=None):
    """Write atomically: a partial file never replaces a good checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(config, model, adam, iteration, state))
    os.replace(tmp, path)
    return path


def _read(buf, offset, fmt):
    size = struct.calcsize(fmt)
    if offset + size > len(buf):
        raise CheckpointError("truncated checkpoint")
    return struct.unpack_from(fmt, buf, offset), offset + size


def decode_records(buf):
    """Parse bytes into ``(header dict, {name: array})``."""
    if buf[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an idensenet checkpoint (bad magic)")
    (version, blob_len), off = _read(buf, len(MAGIC), "<II")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[off : off + blob_len].decode())
    off += blob_len
    (count,), off = _read(buf, off, "<I")
    out = {}
    for _ in range(count):
        (name_len,), off = _read(buf, off, "<H")
        name = buf[off : off + name_len].decode()
        off += name_len
        (rank,), off = _read(buf, off, "<B")
        dims, off = _read(buf, off, f"<{rank}Q")
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        if off + 8 * n > len(buf):
            raise CheckpointError(f"truncated payload for {name!r}")
        out[name] = np.frombuffer(buf, dtype=_LE_F64, count=n, offset=off).astype(np.float64).reshape(dims)
        off += 8 * n
    if off != len(buf):
        raise CheckpointError("trailing bytes after last record")
    return header, out


def restore(config, records, with_optimizer=True):
    """Rebuild a model (and optimizer state) from decoded records."""
    model = build_model(config.model_config())
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in records:
            raise CheckpointError(f"checkpoint lacks {key}")
        if records[key].shape != p.shape:
            raise CheckpointError(f"shape mismatch for {key}: {records[key].shape} vs {p.shape}")
        p.data[...] = records[key]
    for path, w in _spectral(model):
        w.u = records[f"spectral_u/{path}"].copy()
        w.v = records[f"spectral_v/{path}"].copy()
        w.sigma = float(records[f"spectral_sigma/{path}"])
    adam = None
    if with_optimizer and "adam/step" in records:
        lr, b1, b2, eps = records["adam/hyper"]
        adam = AdamState(lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps))
        adam.step = int(records["adam/step"])
        for name, _ in model.named_parameters():
            adam.m[name] = records[f"adam_m/{name}"].copy()
            adam.v[name] = records[f"adam_v/{name}"].copy()
    return model, adam, int(records.get("iteration", np.array(0.0)))


def load(path):
    header, records = decode_records(Path(path).read_bytes())
    config = RunConfig.from_dict(header["config"])
    model, adam, iteration = restore(config, records)
    return Checkpoint(config, model, adam, iteration, header.get("state", {}))
