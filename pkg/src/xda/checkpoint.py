"""Versioned binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"XDA1"
    32-byte SHA-256 of the canonical config text
    repeated until EOF:
        name length, UTF-8 name,
        rank, dims[rank],
        prod(dims) little-endian float32 values

The config itself is stored next to the checkpoint as ``<path>.cfg``.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"XDA1"
HASH_BYTES = 32


class CheckpointError(ValueError):
    pass


def dumps(params, config_hash):
    """Serialise an ordered name->array mapping."""
    if len(config_hash) != HASH_BYTES:
        raise CheckpointError(f"config hash must be {HASH_BYTES} bytes")
    parts = [MAGIC, bytes(config_hash)]
    for name, arr in params.items():
        a = np.asarray(arr)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        parts.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(blob):
    """Inverse of ``dumps``: (config_hash, ordered name->float32 array)."""
    if blob[:4] != MAGIC:
        raise CheckpointError("not an XDA1 checkpoint (bad magic)")
    if len(blob) < 4 + HASH_BYTES:
        raise CheckpointError("truncated checkpoint header")
    config_hash = blob[4 : 4 + HASH_BYTES]
    pos = 4 + HASH_BYTES
    params = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            end = pos + 4 * count
            if end > len(blob):
                raise CheckpointError(f"truncated data for {name!r}")
            params[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos = end
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    return config_hash, params


def save(path, params, config):
    """Write ``path`` and its ``path.cfg`` companion."""
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    with open(path, "wb") as f:
        f.write(dumps(params, config.hash()))
    config.save(path + ".cfg")


def load(path, config=None):
    """Read a checkpoint; returns (config, params). Verifies the config hash."""
    from xda.config import TrainConfig

    with open(path, "rb") as f:
        config_hash, params = loads(f.read())
    if config is None:
        cfg_path = path + ".cfg"
        if not os.path.exists(cfg_path):
            raise CheckpointError(f"missing config file {cfg_path}")
        config = TrainConfig.load(cfg_path)
    if config.hash() != config_hash:
        raise CheckpointError("config does not match the checkpoint's config hash")
    return config, params


def split_state(params):
    """Split 'student.*' / 'teacher.*' entries into two name->array dicts."""
    student, teacher = {}, {}
    for name, arr in params.items():
        prefix, _, rest = name.partition(".")
        if prefix == "student":
            student[rest] = arr
        elif prefix == "teacher":
            teacher[rest] = arr
        else:
            raise CheckpointError(f"unexpected parameter {name!r}")
    return student, teacher


def strip(params):
    """Drop everything but the student weights."""
    return {k: v for k, v in params.items() if k.startswith("student.")}
