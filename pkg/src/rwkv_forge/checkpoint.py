"""Bit-exact checkpoint files.

Layout::

    b"RWKVFRG1"                       8 bytes magic
    header length                     4 bytes, little-endian unsigned
    header                            UTF-8 JSON
    payload                           little-endian float64 tensors, manifest order

The header holds ``format_version``, the model config, a manifest of
``{name, shape, offset, length}`` entries (offsets and lengths in bytes,
relative to the payload start) and ``checksum``: the 64-bit BLAKE2b digest
of the payload as 16 hex characters.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointChecksumError,
    CheckpointError,
    CheckpointManifestError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ParameterError,
)
from .model import Model, ModelConfig, init_model

MAGIC = b"RWKVFRG1"
FORMAT_VERSION = 1
_LE_F64 = np.dtype("<f8")


def payload_checksum(payload: bytes) -> str:
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def dumps(model: Model) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name, t in model.named_parameters().items():
        raw = np.ascontiguousarray(t, dtype=_LE_F64).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "tensors": manifest,
        "checksum": payload_checksum(payload),
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    return MAGIC + struct.pack("<I", len(hb)) + hb + payload


def loads(blob: bytes) -> Model:
    if len(blob) < len(MAGIC) + 4:
        raise CheckpointTruncatedError("file too short for a checkpoint preamble")
    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic bytes; not a checkpoint")
    (hlen,) = struct.unpack("<I", blob[len(MAGIC) : len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(blob) < start + hlen:
        raise CheckpointTruncatedError("header extends past end of file")
    try:
        header = json.loads(blob[start : start + hlen].decode("utf-8"))
        version = int(header["format_version"])
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise CheckpointManifestError(f"unreadable header: {exc}") from exc
    if version > FORMAT_VERSION:
        raise CheckpointVersionError(f"format version {version} is newer than supported {FORMAT_VERSION}")
    if version < 1:
        raise CheckpointVersionError(f"unknown format version {version}")
    payload = blob[start + hlen :]
    try:
        manifest = header["tensors"]
        config = ModelConfig.from_dict(header["config"])
        checksum = header["checksum"]
        expected = sum(int(e["length"]) for e in manifest)
    except (KeyError, TypeError, ValueError, ParameterError) as exc:
        raise CheckpointManifestError(f"incomplete header: {exc}") from exc
    if len(payload) < expected:
        raise CheckpointTruncatedError(f"payload has {len(payload)} bytes, manifest needs {expected}")
    if len(payload) > expected:
        raise CheckpointManifestError(f"payload has {len(payload) - expected} unexpected trailing bytes")
    if payload_checksum(payload) != checksum:
        raise CheckpointChecksumError("payload checksum mismatch")

    model = init_model(config)
    params = model.named_parameters()
    names = [e["name"] for e in manifest]
    if names != list(params):
        raise CheckpointManifestError("manifest tensor names do not match the configured model")
    for entry in manifest:
        target = params[entry["name"]]
        shape = tuple(entry["shape"])
        off, length = int(entry["offset"]), int(entry["length"])
        if shape != target.shape or length != target.size * 8 or off + length > len(payload):
            raise CheckpointManifestError(f"tensor {entry['name']} disagrees with the configured shapes")
        target[...] = np.frombuffer(payload, dtype=_LE_F64, count=target.size, offset=off).reshape(shape)
    return model


def save_checkpoint(model: Model, path: str | Path) -> None:
    """Write via a sibling temp file and rename, so readers never see a partial file."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(dumps(model))
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def load_checkpoint(path: str | Path) -> Model:
    return loads(Path(path).read_bytes())
