"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"AVLM" | u32 version | u32 header_len | header (canonical JSON, UTF-8)
    u32 n_tensors
    n_tensors x ( u32 name_len | name (UTF-8) | u32 ndim | ndim x u64 dim | float64 data )

The header holds the model config, the freeze flags and adapter metadata.
Adapter matrices are stored as tensors named ``lora.<target>.A`` / ``.B``.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .lora import LoraAdapter
from .model import ModelConfig, ModelParams

MAGIC = b"AVLM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _tensor_bytes(name: str, data: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", data.ndim)]
    parts += [struct.pack("<Q", n) for n in data.shape]
    parts.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return b"".join(parts)


def dumps(params: ModelParams) -> bytes:
    header = {"config": params.config.to_dict(), "frozen": params.frozen,
              "adapters": {t: {"rank": a.rank, "alpha": a.alpha}
                           for t, a in sorted(params.adapters.items())}}
    blob = canonical_json(header)
    named = [(k, params.tensors[k].data) for k in sorted(params.tensors)]
    for t in sorted(params.adapters):
        named += [(f"lora.{t}.A", params.adapters[t].A.data), (f"lora.{t}.B", params.adapters[t].B.data)]
    out = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(named))]
    out += [_tensor_bytes(n, d) for n, d in named]
    return b"".join(out)


def loads(buf: bytes) -> ModelParams:
    try:
        return _parse(buf)
    except (struct.error, KeyError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None


def _parse(buf: bytes) -> ModelParams:
    if buf[:4] != MAGIC:
        raise CheckpointError("not an AVLM checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
    pos += hlen
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    arrays = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        count = int(np.prod(shape))
        if pos + 8 * count > len(buf):
            raise CheckpointError(f"tensor {name!r} runs past the end of the file")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
        pos += 8 * count
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    config = ModelConfig.from_dict(header["config"])
    adapters = {}
    for target, meta in header["adapters"].items():
        A = Tensor(arrays.pop(f"lora.{target}.A"), requires_grad=True, name=f"lora.{target}.A")
        B = Tensor(arrays.pop(f"lora.{target}.B"), requires_grad=True, name=f"lora.{target}.B")
        adapters[target] = LoraAdapter(target, A, B, int(meta["rank"]), float(meta["alpha"]))
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return ModelParams(config, tensors, header["frozen"], adapters)


def save(params: ModelParams, path) -> str:
    """Write ``params`` to ``path``; return the SHA-256 of the file contents."""
    buf = dumps(params)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load(path) -> ModelParams:
    return loads(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
