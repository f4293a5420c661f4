"""Binary checkpoint format: named parameter blocks with shape headers.

Layout: magic "DRCK", u32 format version, u32 stage, u64 step, 64-byte config
hash (hex), u32 block count, then per block [u16 name_len][name][u8 dtype code]
[u8 ndim][u64 dims...][raw little-endian data].  Save -> load -> save round-trips
bitwise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, InputError, MissingArtifactError

_MAGIC = b"DRCK"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {"float32": 0, "float64": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}


@dataclass
class CheckpointMeta:
    stage: int
    step: int
    config_hash: str
    version: int = CHECKPOINT_VERSION


def save_checkpoint(path: Path, model: torch.nn.Module, stage: int, step: int, config_hash: str) -> None:
    if len(config_hash) != 64:
        raise InputError("config_hash must be a 64-character sha256 hex digest")
    blocks = []
    for name, param in sorted(model.state_dict().items()):
        array = param.detach().cpu().numpy()
        code = _DTYPE_CODES.get(str(array.dtype))
        if code is None:
            raise InputError(f"unsupported parameter dtype {array.dtype} in {name}")
        encoded_name = name.encode()
        header = struct.pack("<H", len(encoded_name)) + encoded_name
        header += struct.pack("<BB", code, array.ndim)
        header += struct.pack(f"<{array.ndim}Q", *array.shape)
        blocks.append(header + array.astype(array.dtype.newbyteorder("<")).tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<IIQ", CHECKPOINT_VERSION, stage, step))
        fh.write(config_hash.encode())
        fh.write(struct.pack("<I", len(blocks)))
        for block in blocks:
            fh.write(block)


def read_checkpoint(path: Path) -> tuple[CheckpointMeta, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} does not exist")
    data = path.read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: bad magic {data[:4]!r}")
    version, stage, step = struct.unpack_from("<IIQ", data, 4)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    config_hash = data[20:84].decode()
    (count,) = struct.unpack_from("<I", data, 84)
    offset = 88
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode()
        offset += name_len
        code, ndim = struct.unpack_from("<BB", data, offset)
        offset += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += 8 * ndim
        dtype = np.dtype(_DTYPE_NAMES[code]).newbyteorder("<")
        nbytes = int(np.prod(shape)) * dtype.itemsize if ndim else dtype.itemsize
        array = np.frombuffer(data[offset : offset + nbytes], dtype=dtype).reshape(shape)
        offset += nbytes
        blocks[name] = array.copy()
    if offset != len(data):
        raise InputError(f"{path}: trailing bytes after {count} blocks")
    return CheckpointMeta(stage=int(stage), step=int(step), config_hash=config_hash), blocks


def load_checkpoint(
    path: Path,
    model: torch.nn.Module,
    expect_config_hash: str | None = None,
    allow_mismatch: bool = False,
) -> CheckpointMeta:
    meta, blocks = read_checkpoint(path)
    if expect_config_hash is not None and meta.config_hash != expect_config_hash and not allow_mismatch:
        raise ConfigError(
            f"{path}: checkpoint config hash {meta.config_hash[:12]}... does not match the "
            f"current config {expect_config_hash[:12]}... (pass the override flag to load anyway)"
        )
    state = {name: torch.as_tensor(arr) for name, arr in blocks.items()}
    model.load_state_dict(state)
    return meta
