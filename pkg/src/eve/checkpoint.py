"""Versioned little-endian checkpoint archive.

Layout::

    magic  b"EVEK"
    u32    format version
    32B    sha256 digest of the architecture config
    u64    step
    u64    optimizer step
    u32 + utf-8   full config text
    u32 + utf-8   rng state (json)
    u32 + utf-8   metadata (json), e.g. which objectives were trained
    u32    tensor count
    per tensor (sorted by name):
        u32 + utf-8 name, u8 dtype code, u32 ndim, u32 * ndim shape, raw payload

Serialisation is a pure function of the contents, so save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod

MAGIC = b"EVEK"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    digest: bytes
    step: int
    opt_step: int
    rng_state: dict
    tensors: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def config(self):
        return config_mod.Config(**config_mod.parse_text(self.config_text))

    def params(self):
        return {k[len("param/"):]: v for k, v in self.tensors.items() if k.startswith("param/")}


def _str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def to_bytes(ck):
    out = [MAGIC, struct.pack("<I", VERSION), ck.digest, struct.pack("<QQ", ck.step, ck.opt_step),
           _str(ck.config_text), _str(json.dumps(ck.rng_state, sort_keys=True)),
           _str(json.dumps(ck.meta, sort_keys=True)),
           struct.pack("<I", len(ck.tensors))]
    for name in sorted(ck.tensors):
        arr = np.asarray(ck.tensors[name])
        code = CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        out.append(_str(name))
        out.append(struct.pack("<BI", code, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    return b"".join(out)


def from_bytes(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported")
    digest = bytes(buf[8:40])
    step, opt_step = struct.unpack_from("<QQ", buf, 40)
    off = 56

    def read_str():
        nonlocal off
        (n,) = struct.unpack_from("<I", buf, off)
        s = bytes(buf[off + 4:off + 4 + n]).decode("utf-8")
        off += 4 + n
        return s

    cfg_text = read_str()
    rng_state = json.loads(read_str())
    meta = json.loads(read_str())
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        name = read_str()
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(shape).astype(dt.newbyteorder("="))
        off += n * dt.itemsize
    return Checkpoint(cfg_text, digest, step, opt_step, rng_state, tensors, meta)


def capture(cfg, model, optimizer=None, step=0, rng_state=None, meta=None):
    tensors = {f"param/{n}": p.data for n, p in model.named_parameters()}
    opt_step = 0
    if optimizer is not None:
        tensors.update(optimizer.state_tensors())
        opt_step = optimizer.t
    return Checkpoint(cfg.to_text(), cfg.digest(), int(step), int(opt_step),
                      rng_state or {"kind": "philox-keyed", "seed": cfg.seed}, tensors, dict(meta or {}))


def save(path, ck):
    with open(path, "wb") as fh:
        fh.write(to_bytes(ck))


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def restore(ck, model, optimizer=None, cfg=None):
    """Load parameters (and optimizer moments) after checking the architecture digest."""
    if cfg is not None and cfg.digest() != ck.digest:
        raise CheckpointError("checkpoint was written for a different architecture config")
    model.load_state_dict(ck.params())
    model.trained_tasks = tuple(ck.meta.get("tasks", ()))
    if optimizer is not None:
        optimizer.load_state_tensors(ck.tensors, ck.opt_step)
