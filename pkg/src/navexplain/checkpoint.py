"""Binary parameter checkpoints.

Layout (little-endian)::

    b"NAVXCKPT" | u32 version | u32 header length | JSON header | float32 payload | SHA-256 digest

The header holds the ``frozen`` flag, a ``kind`` tag and the manifest: a list
of ``[name, shape]`` in payload order.  The digest covers every preceding
byte, so truncation or corruption is detected on load.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"NAVXCKPT"
VERSION = 1
DIGEST_SIZE = 32


class CheckpointError(ValueError):
    """Checkpoint cannot be loaded."""


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write via a temporary file in the same directory and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass
class Checkpoint:
    version: int
    kind: str
    frozen: bool
    manifest: list[tuple[str, tuple[int, ...]]]
    arrays: dict[str, np.ndarray]


def encode_checkpoint(named_params, frozen: bool = False, kind: str = "") -> bytes:
    manifest = [[name, list(p.data.shape)] for name, p in named_params]
    header = json.dumps({"kind": kind, "frozen": bool(frozen), "params": manifest}, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f4").tobytes() for _, p in named_params)
    body = MAGIC + struct.pack("<II", VERSION, len(header)) + header + payload
    return body + hashlib.sha256(body).digest()


def save_checkpoint(path, named_params, frozen: bool = False, kind: str = "") -> None:
    atomic_write_bytes(path, encode_checkpoint(named_params, frozen, kind))


def decode_checkpoint(blob: bytes, source: str = "<checkpoint>") -> Checkpoint:
    if len(blob) < len(MAGIC) + 8 + DIGEST_SIZE or blob[:len(MAGIC)] != MAGIC:
        if blob[:len(MAGIC)] == MAGIC:
            raise CheckpointError(f"{source}: checksum mismatch (file truncated)")
        raise CheckpointError(f"{source}: not a checkpoint file")
    body, digest = blob[:-DIGEST_SIZE], blob[-DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{source}: checksum mismatch (file corrupt or truncated)")
    version, header_len = struct.unpack_from("<II", body, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version}")
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + header_len])
    payload = body[start + header_len:]
    manifest = [(name, tuple(shape)) for name, shape in header["params"]]
    total = sum(int(np.prod(s)) for _, s in manifest)
    if len(payload) != 4 * total:
        raise CheckpointError(f"{source}: payload holds {len(payload) // 4} floats, manifest needs {total}")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays, offset = {}, 0
    for name, shape in manifest:
        size = int(np.prod(shape))
        arrays[name] = flat[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    return Checkpoint(version, header.get("kind", ""), bool(header["frozen"]), manifest, arrays)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"{path}: no such checkpoint")
    return decode_checkpoint(path.read_bytes(), str(path))


def apply_checkpoint(ckpt: Checkpoint, named_params, source: str = "<checkpoint>") -> None:
    """Copy checkpoint arrays into ``named_params`` after a manifest diff."""
    wanted = {name: p for name, p in named_params}
    missing = [n for n in wanted if n not in ckpt.arrays]
    if missing:
        raise CheckpointError(f"{source}: checkpoint lacks parameters required by the model: {', '.join(missing)}")
    extra = [n for n in ckpt.arrays if n not in wanted]
    if extra:
        raise CheckpointError(f"{source}: checkpoint has parameters the model does not: {', '.join(extra)}")
    for name, p in named_params:
        if ckpt.arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{source}: shape mismatch for {name}: checkpoint {ckpt.arrays[name].shape}, "
                                  f"model {p.data.shape}")
    for name, p in named_params:
        p.data[...] = ckpt.arrays[name]
