"""Binary container shared by checkpoints ("MRCC") and measurement files ("MRMS").

Layout, all integers little-endian::

    magic        4 bytes
    version      u16
    header_len   u32, then header_len bytes of UTF-8 JSON (sorted keys)
    n_records    u32
    per record:  name_len u16, name (UTF-8), rank u8, rank x u32 dims,
                 prod(dims) float32 values
    checksum     32-byte SHA-256 of every preceding byte
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

FORMAT_VERSION = 1
CHECKPOINT_MAGIC = b"MRCC"
MEASUREMENTS_MAGIC = b"MRMS"


def encode_container(magic: bytes, header: dict, records) -> bytes:
    parts = [magic, struct.pack("<H", FORMAT_VERSION)]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    parts += [struct.pack("<I", len(blob)), blob, struct.pack("<I", len(records))]
    for name, value in records.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.ascontiguousarray(arr, dtype="<f4")
        key = name.encode()
        parts.append(struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def decode_container(data: bytes, magic: bytes) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    if len(data) < 46 or data[:4] != magic:
        raise DataError(f"not a {magic.decode()} file (magic {data[:4]!r})")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise DataError("checksum mismatch; file is corrupt or truncated")
    (version,) = struct.unpack_from("<H", body, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported format version {version}")
    (hlen,) = struct.unpack_from("<I", body, 6)
    pos = 10
    header = json.loads(body[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    records = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos:pos + nlen].decode()
        pos += nlen
        (rank,) = struct.unpack_from("<B", body, pos)
        pos += 1
        dims = struct.unpack_from(f"<{rank}I", body, pos)
        pos += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        records[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).copy()
        pos += 4 * n
    if pos != len(body):
        raise DataError(f"{len(body) - pos} trailing bytes after last record")
    return header, records


def save_checkpoint(path, model, config: dict) -> Path:
    path = Path(path)
    path.write_bytes(encode_container(CHECKPOINT_MAGIC, {"config": config},
                                      OrderedDict(model.state_dict())))
    return path


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    header, records = decode_container(Path(path).read_bytes(), CHECKPOINT_MAGIC)
    return header["config"], records


def load_into(model, records) -> None:
    state = model.state_dict()
    if list(state) != list(records):
        raise ConfigError(
            f"checkpoint parameters do not match model: {sorted(set(state) ^ set(records))}"
        )
    for name, arr in records.items():
        if tuple(state[name].shape) != arr.shape:
            raise ConfigError(f"{name}: checkpoint shape {arr.shape} vs model {tuple(state[name].shape)}")
    model.load_state_dict({k: torch.from_numpy(v) for k, v in records.items()})


def save_measurements(path, y: torch.Tensor, header: dict) -> Path:
    path = Path(path)
    path.write_bytes(encode_container(MEASUREMENTS_MAGIC, header, {"measurements": y}))
    return path


def read_measurements(path) -> tuple[dict, torch.Tensor]:
    header, records = decode_container(Path(path).read_bytes(), MEASUREMENTS_MAGIC)
    return header, torch.from_numpy(records["measurements"])
