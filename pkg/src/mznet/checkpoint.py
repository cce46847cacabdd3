"""Binary checkpoint format.

Layout (all integers little-endian):

    magic "MZNT" | version u32 | config_len u32 | config utf-8 bytes |
    step u64 | proxy_seed u64 | tensor_count u32 |
    per tensor: path_len u32, path utf-8, dtype u8 (1=f64, 2=f32),
                rank u8, dims u32 * rank, payload little-endian |
    crc32 u32 of everything before it

Optimizer moments ride in the tensor table under "optim.m." / "optim.v."
prefixes so training can resume; loaders that only want model weights
ignore them. Unknown versions and CRC mismatches are rejected.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor

MAGIC = b"MZNT"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float64): 1, np.dtype(np.float32): 2}
_TAG_DTYPES = {1: np.dtype(np.float64), 2: np.dtype(np.float32)}


class CheckpointError(IOError):
    pass


@dataclass
class CheckpointData:
    params: dict
    model_config: object
    step: int
    proxy_seed: int
    optim_m: dict = field(default_factory=dict)
    optim_v: dict = field(default_factory=dict)


def _write_tensor(buf, path, arr):
    data = np.ascontiguousarray(arr)
    if data.dtype not in _DTYPE_TAGS:
        raise CheckpointError(f"unsupported dtype {data.dtype} for '{path}'")
    encoded = path.encode("utf-8")
    buf.write(struct.pack("<I", len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack("<BB", _DTYPE_TAGS[data.dtype], data.ndim))
    buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
    if data.dtype.byteorder == ">":  # pragma: no cover - LE platforms
        data = data.byteswap()
    buf.write(data.tobytes())


def save_checkpoint(path, params, model_config, step, proxy_seed, optim_state=None):
    from .config import serialize_configs

    config_text = serialize_configs(model_config).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(config_text)))
    buf.write(config_text)
    buf.write(struct.pack("<QQ", int(step), int(proxy_seed)))
    entries = [(p, t.data) for p, t in params.items()]
    if optim_state is not None:
        entries += [(f"optim.m.{p}", a) for p, a in optim_state.m.items()]
        entries += [(f"optim.v.{p}", a) for p, a in optim_state.v.items()]
    buf.write(struct.pack("<I", len(entries)))
    for tensor_path, arr in entries:
        _write_tensor(buf, tensor_path, arr)
    body = buf.getvalue()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path):
    from .config import parse_model_config

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: file too small to be a checkpoint")
    body, crc_bytes = blob[:-4], blob[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(body) != crc_stored:
        raise CheckpointError(f"{path}: CRC mismatch, checkpoint is corrupt")
    rd = _Reader(body, str(path))
    if rd.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (config_len,) = rd.unpack("<I")
    config_text = rd.take(config_len).decode("utf-8")
    step, proxy_seed = rd.unpack("<QQ")
    (count,) = rd.unpack("<I")

    params = {}
    optim_m = {}
    optim_v = {}
    for _ in range(count):
        (path_len,) = rd.unpack("<I")
        tensor_path = rd.take(path_len).decode("utf-8")
        tag, rank = rd.unpack("<BB")
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype tag {tag}")
        dims = rd.unpack(f"<{rank}I")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arr = np.frombuffer(rd.take(nbytes), dtype=dtype).reshape(dims).copy()
        if tensor_path.startswith("optim.m."):
            optim_m[tensor_path[len("optim.m."):]] = arr
        elif tensor_path.startswith("optim.v."):
            optim_v[tensor_path[len("optim.v."):]] = arr
        else:
            params[tensor_path] = Tensor(arr, requires_grad=True)
    if rd.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return CheckpointData(
        params=params,
        model_config=parse_model_config(config_text),
        step=int(step),
        proxy_seed=int(proxy_seed),
        optim_m=optim_m,
        optim_v=optim_v,
    )
