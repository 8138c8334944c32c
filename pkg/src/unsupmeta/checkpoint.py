"""Binary checkpoint container.

Layout::

    b"SMUP" | u32 format version | u32 header length | header (UTF-8 JSON) | payload

The header is canonical JSON (sorted keys, no whitespace) holding the profile
name, a config snapshot, free-form metadata (RNG states, counters), the CRC32
of the payload and one ``{name, shape, offset}`` entry per array.  Arrays are
stored sorted by name as little-endian float64, so saving the same content
twice gives identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SMUP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    profile: str
    arrays: dict
    config: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode(ckpt: Checkpoint) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(ckpt.arrays):
        arr = np.ascontiguousarray(np.asarray(ckpt.arrays[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = _canonical({
        "profile": ckpt.profile,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "arrays": entries,
        "payload_bytes": len(payload),
        "crc32": zlib.crc32(payload),
    })
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload


def decode(raw: bytes) -> Checkpoint:
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    if len(raw) < 12 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint header: {err}") from None
    payload = raw[12 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError("payload length does not match the header")
    if zlib.crc32(payload) != header["crc32"]:
        raise CheckpointError("checksum mismatch: payload is corrupt")
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return Checkpoint(header["profile"], arrays, header["config"], header["meta"])


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(encode(ckpt))


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ------------------------------------------------------------ conveniences


def theta_checkpoint(theta, cfg, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(cfg.profile, {f"theta/{k}": v for k, v in theta.arrays().items()}, cfg.to_dict(),
                      dict(meta or {}))


def trainer_checkpoint(trainer) -> Checkpoint:
    arrays, meta = trainer.state_dict()
    return Checkpoint(trainer.cfg.profile, arrays, trainer.cfg.to_dict(), meta)


def load_theta(path):
    """``(theta, cfg, checkpoint)`` from any checkpoint holding ``theta/*`` arrays."""
    from .config import config_from_dict
    from .update_rule import init_theta

    ckpt = load(path)
    cfg = config_from_dict(ckpt.config)
    theta_arrays = {k[len("theta/"):]: v for k, v in ckpt.arrays.items() if k.startswith("theta/")}
    if not theta_arrays:
        raise CheckpointError("checkpoint holds no update-rule parameters")
    theta = init_theta(cfg.rule, 0).replace(theta_arrays)
    return theta, cfg, ckpt


def restore_trainer(path):
    from .config import config_from_dict
    from .trainer import SequentialTrainer

    ckpt = load(path)
    cfg = config_from_dict(ckpt.config)
    trainer = SequentialTrainer(cfg)
    trainer.load_state_dict(ckpt.arrays, ckpt.meta)
    return trainer
