"""Binary checkpoint format shared by the model and the feature-loss weights.

Layout (all integers little-endian):

    magic   4 bytes  b"M2SN"
    version u32      currently 1
    count   u32      number of tensors
    per tensor:
        name_len u16, name UTF-8
        dtype    u8   (0 = f32, 1 = f64)
        rank     u8
        dims     u32 each
        values   raw little-endian floats, C order

Free-form metadata (the model config) rides along as a regular tensor
whose float values are the UTF-8 bytes of the text payload; see
`encode_text` / `decode_text`.
"""

from __future__ import annotations

import struct
from typing import Dict, Tuple

import numpy as np

from .errors import FormatError

MAGIC = b"M2SN"
VERSION = 1

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save(path, tensors: Dict[str, np.ndarray]) -> None:
    """Write named float arrays; insertion order is preserved."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODE:
            raise FormatError(f"tensor {name!r}: dtype {arr.dtype} not storable (f32/f64 only)")
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _DTYPE_CODE[arr.dtype], arr.ndim)
        for d in arr.shape:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 8)
    offset = 12
    out: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            dtype_code, rank = struct.unpack_from("<BB", blob, offset)
            offset += 2
            if dtype_code not in _CODE_DTYPE:
                raise FormatError(f"{path}: tensor {name!r} has unknown dtype code {dtype_code}")
            dims: Tuple[int, ...] = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
            offset += 4 * rank
            dtype = _CODE_DTYPE[dtype_code]
            n = int(np.prod(dims)) if rank else 1
            nbytes = n * dtype.itemsize
            if offset + nbytes > len(blob):
                raise FormatError(f"{path}: tensor {name!r} truncated at byte {offset}")
            arr = np.frombuffer(blob, dtype=dtype, count=n, offset=offset).reshape(dims)
            out[name] = arr.astype(dtype.newbyteorder("="))
            offset += nbytes
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint at byte {offset}: {exc}") from exc
    return out


def encode_text(text: str) -> np.ndarray:
    """Pack a UTF-8 string into a rank-1 f64 array (byte values)."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def decode_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr).astype(np.uint8)).decode("utf-8")
