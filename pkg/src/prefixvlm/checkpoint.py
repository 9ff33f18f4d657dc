"""Checkpoint container.

Layout::

    b"VLMCKPT\\0"                 magic
    uint32 LE                     format version
    uint64 LE                     header length in bytes
    header                        UTF-8 JSON: config, parameter manifest,
                                  vocabulary, extra metadata, blob checksum
    blobs                         float64 little-endian, declaration order

Writes go to a temporary file that is renamed into place.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .data import Vocabulary
from .model import VLMConfig, VLMParams, param_shapes
from .tensor import Tensor

MAGIC = b"VLMCKPT\0"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ConfigMismatch(CheckpointError):
    pass


def save_checkpoint(path, params, cfg, vocab=None, extra=None):
    path = Path(path)
    blobs = [np.ascontiguousarray(t.data, dtype="<f8").tobytes() for _, t in params.items()]
    payload = b"".join(blobs)
    header = {
        "config": cfg.to_dict(),
        "params": [{"name": n, "shape": list(t.shape)} for n, t in params.items()],
        "vocab": vocab.tokens if vocab is not None else None,
        "extra": extra or {},
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", FORMAT_VERSION, len(head)))
            fh.write(head)
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path, expect_config=None):
    """Return ``(params, cfg, vocab, extra)``; raises on corruption or mismatch."""
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(MAGIC)
    if len(buf) < off + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, head_len = struct.unpack_from("<IQ", buf, off)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off += 12
    try:
        header = json.loads(buf[off:off + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    payload = buf[off + head_len:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: truncated payload")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: checksum mismatch")
    cfg = VLMConfig.from_dict(header["config"])
    if expect_config is not None and cfg != expect_config:
        raise ConfigMismatch(f"{path}: checkpoint config differs from the requested model "
                             f"({_diff(cfg, expect_config)})")
    expected = [(n, tuple(s)) for n, s, _ in param_shapes(cfg)]
    stored = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if stored != expected:
        raise CheckpointError(f"{path}: parameter manifest does not match its config")
    tensors = OrderedDict()
    pos = 0
    for name, shape in stored:
        n = int(np.prod(shape)) * 8
        data = np.frombuffer(payload[pos:pos + n], dtype="<f8").reshape(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
        pos += n
    vocab = Vocabulary(header["vocab"], max_size=cfg.decoder.vocab) if header["vocab"] else None
    return VLMParams(tensors), cfg, vocab, header["extra"]


def _diff(a, b):
    da, db = a.to_dict(), b.to_dict()
    out = []
    for part in ("vision", "decoder"):
        for k in da[part]:
            if da[part][k] != db[part][k]:
                out.append(f"{part}.{k}: {da[part][k]} vs {db[part][k]}")
    return "; ".join(out) or "global settings differ"
