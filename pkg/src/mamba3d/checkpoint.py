"""Binary checkpoints: magic, version, JSON header, raw little-endian tensor payloads.

Layout::

    b"M3DC" | u32 LE version | u64 LE header length | UTF-8 JSON header | payloads

The header holds the encoder config, the tensor manifest (group, name, shape,
dtype, byte offset into the payload area), scalar optimizer state, the RNG
state, the epoch and a free-form ``meta`` dict.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig
from .geometry import atomic_write_bytes
from .tensor import Tensor
from .training import OptimizerState

MAGIC = b"M3DC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")
_WIRE = {"f32": "<f4", "f64": "<f8"}


class CheckpointError(ValueError):
    """Base class for unreadable checkpoint files."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: EncoderConfig
    params: dict[str, Tensor]
    optimizer: OptimizerState | None = None
    rng_state: dict | None = None
    epoch: int = 0
    meta: dict = field(default_factory=dict)


def _wire_name(a: np.ndarray) -> str:
    for name, code in _WIRE.items():
        if a.dtype == np.dtype(code):
            return name
    raise TypeError(f"cannot store dtype {a.dtype} in a checkpoint")


def _entries(ck: Checkpoint):
    for name, t in ck.params.items():
        yield "param", name, t.data
    if ck.optimizer is not None:
        for name, a in ck.optimizer.m.items():
            yield "m", name, a
        for name, a in ck.optimizer.v.items():
            yield "v", name, a


def to_bytes(ck: Checkpoint) -> bytes:
    manifest, chunks, offset = [], [], 0
    for group, name, a in _entries(ck):
        dt = _wire_name(np.asarray(a))
        raw = np.ascontiguousarray(a, dtype=_WIRE[dt]).tobytes()
        manifest.append({"group": group, "name": name, "shape": list(np.shape(a)), "dtype": dt,
                         "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    opt = None
    if ck.optimizer is not None:
        o = ck.optimizer
        opt = {"lr": o.lr, "betas": list(o.betas), "eps": o.eps, "weight_decay": o.weight_decay,
               "step": o.step, "no_decay": sorted(o.no_decay)}
    header = {"config": ck.config.to_dict(), "manifest": manifest, "optimizer": opt,
              "rng_state": ck.rng_state, "epoch": ck.epoch, "meta": ck.meta}
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + b"".join(chunks)


def from_bytes(data: bytes) -> Checkpoint:
    if len(data) < len(MAGIC):
        if MAGIC.startswith(data):
            raise TruncatedCheckpointError(f"file ends after {len(data)} bytes, inside the magic")
        raise BadMagicError(f"not a checkpoint: magic {data!r}")
    if data[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint: magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < _PREFIX.size:
        raise TruncatedCheckpointError(f"file ends after {len(data)} bytes, inside the fixed prefix")
    _, version, hlen = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads version {VERSION}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise TruncatedCheckpointError(f"header needs {hlen} bytes, file has {len(data) - _PREFIX.size}")
    try:
        header = json.loads(data[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    manifest = header["manifest"]
    need = start + sum(e["nbytes"] for e in manifest)
    if len(data) < need:
        raise TruncatedCheckpointError(f"payload needs {need} bytes, file has {len(data)}")
    groups: dict[str, dict] = {"param": {}, "m": {}, "v": {}}
    for e in manifest:
        lo = start + e["offset"]
        a = np.frombuffer(data[lo : lo + e["nbytes"]], dtype=_WIRE[e["dtype"]]).reshape(e["shape"])
        groups[e["group"]][e["name"]] = a.astype(_WIRE[e["dtype"]][1:], copy=True)
    opt = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        opt = OptimizerState(lr=o["lr"], betas=tuple(o["betas"]), eps=o["eps"], weight_decay=o["weight_decay"],
                             step=o["step"], m=groups["m"], v=groups["v"], no_decay=frozenset(o["no_decay"]))
    params = {k: Tensor(a) for k, a in groups["param"].items()}
    return Checkpoint(EncoderConfig.from_dict(header["config"]), params, opt, header["rng_state"],
                      header["epoch"], header["meta"])


def save_checkpoint(path, ck: Checkpoint) -> None:
    atomic_write_bytes(path, to_bytes(ck))


def load_checkpoint(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def read_header(path) -> dict:
    """Header only, for inspection; validates magic, version and length like a full load."""
    data = Path(path).read_bytes()
    from_bytes(data)
    _, _, hlen = _PREFIX.unpack_from(data)
    header = json.loads(data[_PREFIX.size : _PREFIX.size + hlen].decode("utf-8"))
    header["version"] = VERSION
    return header
