"""``.ptck`` checkpoint files and a content-addressed experiment store.

File layout::

    b"PTCK\\0" | u64 little-endian header length | UTF-8 JSON header | payload

The header holds ``format_version``, the model config, provenance and a
tensor table ``name -> {dtype, shape, offset, length}``. The payload is the
concatenation of little-endian float32 buffers in table order.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
import threading
from pathlib import Path

import numpy as np

from .model import Checkpoint, ModelConfig, param_shapes

MAGIC = b"PTCK\0"
FORMAT_VERSION = 1
SUFFIX = ".ptck"
_LEN = struct.Struct("<Q")


class CheckpointFormatError(ValueError):
    pass


class CorruptHeaderError(CheckpointFormatError):
    pass


class TruncatedPayloadError(CheckpointFormatError):
    pass


class UnsupportedVersionError(CheckpointFormatError):
    pass


class NameSetMismatchError(CheckpointFormatError):
    pass


def _tensor_table(ckpt: Checkpoint) -> dict:
    table, offset = {}, 0
    for name, arr in ckpt.tensors.items():
        n = arr.size * 4
        table[name] = {"dtype": "f32", "shape": list(arr.shape), "offset": offset, "length": n}
        offset += n
    return table


def _payload(ckpt: Checkpoint) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in ckpt.tensors.values())


def _dump(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), sort_keys=False).encode()


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "config": ckpt.config.to_dict(),
        "provenance": ckpt.provenance,
        "tensors": _tensor_table(ckpt),
    }
    head = _dump(header)
    return MAGIC + _LEN.pack(len(head)) + head + _payload(ckpt)


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[: len(MAGIC)] != MAGIC:
        raise CorruptHeaderError("bad magic bytes")
    pos = len(MAGIC)
    if len(blob) < pos + _LEN.size:
        raise CorruptHeaderError("file too short for header length")
    (hlen,) = _LEN.unpack_from(blob, pos)
    pos += _LEN.size
    if len(blob) < pos + hlen:
        raise CorruptHeaderError("header extends past end of file")
    try:
        header = json.loads(blob[pos: pos + hlen].decode())
        version = header["format_version"]
        cfg_dict, table = header["config"], header["tensors"]
        provenance = header.get("provenance", {})
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
        raise CorruptHeaderError(f"unreadable header: {e}") from None
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported format version {version!r}")
    try:
        config = ModelConfig.from_dict(cfg_dict)
    except (TypeError, ValueError) as e:
        raise CorruptHeaderError(f"invalid model config: {e}") from None

    expected = param_shapes(config)
    if list(table) != list(expected):
        raise NameSetMismatchError(
            f"tensor names differ from config: missing={sorted(set(expected) - set(table))}, "
            f"extra={sorted(set(table) - set(expected))}")
    payload = memoryview(blob)[pos + hlen:]
    tensors, cursor = {}, 0
    for name, entry in table.items():
        shape = tuple(entry["shape"])
        if shape != expected[name]:
            raise NameSetMismatchError(f"{name}: header shape {shape} != config shape {expected[name]}")
        if entry.get("dtype") != "f32":
            raise CorruptHeaderError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["offset"] != cursor or entry["length"] != n:
            raise CorruptHeaderError(f"{name}: offsets are not contiguous and ascending")
        if cursor + n > len(payload):
            raise TruncatedPayloadError(f"payload ends inside tensor {name}")
        tensors[name] = np.frombuffer(payload[cursor: cursor + n], dtype="<f4").astype(np.float32).reshape(shape)
        cursor += n
    if cursor != len(payload):
        raise CorruptHeaderError(f"{len(payload) - cursor} trailing payload bytes")
    return Checkpoint(config, tensors, provenance)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> Path:
    """Write atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(to_bytes(ckpt))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path: str | os.PathLike) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())


def digest(ckpt: Checkpoint) -> str:
    """SHA-256 over config, tensor table and payload; provenance is excluded."""
    h = hashlib.sha256()
    h.update(_dump({"format_version": FORMAT_VERSION, "config": ckpt.config.to_dict(),
                    "tensors": _tensor_table(ckpt)}))
    h.update(_payload(ckpt))
    return h.hexdigest()


class Store:
    """Content-addressed checkpoints plus named references and a record log.

    ``<root>/objects/<digest>.ptck`` holds checkpoints, ``<root>/refs.json``
    maps job keys to digests, ``<root>/records.ndjson`` collects run records.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        (self.root / "objects").mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path_of(self, key: str) -> Path:
        return self.root / "objects" / f"{key}{SUFFIX}"

    def put(self, ckpt: Checkpoint) -> str:
        key = digest(ckpt)
        path = self.path_of(key)
        if not path.exists():
            save(ckpt, path)
        return key

    def get(self, key: str) -> Checkpoint:
        return load(self.path_of(key))

    def _refs(self) -> dict:
        f = self.root / "refs.json"
        return json.loads(f.read_text()) if f.exists() else {}

    def ref(self, name: str) -> str | None:
        return self._refs().get(name)

    def set_ref(self, name: str, key: str) -> None:
        with self._lock:
            refs = self._refs()
            refs[name] = key
            f = self.root / "refs.json"
            tmp = f.with_suffix(".tmp")
            tmp.write_text(json.dumps(refs, indent=1, sort_keys=True))
            os.replace(tmp, f)

    def append_record(self, line: str, filename: str = "records.ndjson") -> None:
        with self._lock, open(self.root / filename, "a") as fh:
            fh.write(line.rstrip("\n") + "\n")
