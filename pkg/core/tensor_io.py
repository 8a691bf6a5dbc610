"""
ASLT / ASLW Binary Codecs
=========================

ASLT (one tensor):
    b"ASLT" | u8 version=1 | u8 dtype (0=f32, 1=f64) | u8 ndim |
    ndim x u32 LE dims | raw LE payload

ASLW (named parameter collection):
    b"ASLW" | u8 version=1 | u32 LE record count |
    records of (u16 LE name length | utf-8 name | ASLT blob)

Readers validate the whole buffer before returning anything.
"""

import logging
import struct
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np

from .exceptions import TensorFormatError, WeightFileError
from .tensor import Tensor
from .utils import atomic_write_bytes

logger = logging.getLogger(__name__)

ASLT_MAGIC = b"ASLT"
ASLW_MAGIC = b"ASLW"
FORMAT_VERSION = 1

_DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODE_FOR_DTYPE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

PathLike = Union[str, Path]


def encode_tensor(tensor: Tensor) -> bytes:
    """Serialize one tensor to an ASLT blob."""
    code = _CODE_FOR_DTYPE.get(tensor.dtype)
    if code is None:
        raise TensorFormatError(f"cannot encode dtype {tensor.dtype}")
    if tensor.ndim > 255:
        raise TensorFormatError(f"too many dimensions: {tensor.ndim}")
    header = ASLT_MAGIC + struct.pack("<BBB", FORMAT_VERSION, code, tensor.ndim)
    dims = np.asarray(tensor.shape, dtype="<u4").tobytes()
    payload = np.ascontiguousarray(tensor.numpy(), dtype=_DTYPE_CODES[code]).tobytes()
    return header + dims + payload


def decode_tensor(buffer: bytes, offset: int = 0) -> Tuple[Tensor, int]:
    """
    Parse an ASLT blob starting at ``offset``.

    Returns:
        Tuple of (tensor, offset just past the blob)
    """
    end_header = offset + 7
    if len(buffer) < end_header:
        raise TensorFormatError("truncated ASLT header")
    if buffer[offset:offset + 4] != ASLT_MAGIC:
        raise TensorFormatError(f"bad ASLT magic {bytes(buffer[offset:offset + 4])!r}")
    version, code, ndim = struct.unpack_from("<BBB", buffer, offset + 4)
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported ASLT version {version}")
    if code not in _DTYPE_CODES:
        raise TensorFormatError(f"unknown ASLT dtype code {code}")

    dims_end = end_header + 4 * ndim
    if len(buffer) < dims_end:
        raise TensorFormatError("truncated ASLT dims")
    dims: Tuple[int, ...] = ()
    if ndim:
        dims = tuple(int(d) for d in np.frombuffer(buffer, dtype="<u4", count=ndim, offset=end_header))
    if any(d == 0 for d in dims):
        raise TensorFormatError(f"zero-sized dimension in {dims}")

    dtype = _DTYPE_CODES[code]
    count = int(np.prod(dims)) if dims else 1
    payload_end = dims_end + count * dtype.itemsize
    if len(buffer) < payload_end:
        raise TensorFormatError(f"truncated ASLT payload: need {payload_end - dims_end} bytes")
    data = np.frombuffer(buffer, dtype=dtype, count=count, offset=dims_end).reshape(dims)
    native = np.float32 if code == 0 else np.float64
    return Tensor(data, dtype=native), payload_end


def save_tensor(tensor: Tensor, path: PathLike) -> Path:
    return atomic_write_bytes(path, encode_tensor(tensor))


def load_tensor(path: PathLike) -> Tensor:
    buffer = Path(path).read_bytes()
    tensor, end = decode_tensor(buffer)
    if end != len(buffer):
        raise TensorFormatError(f"{path}: {len(buffer) - end} trailing bytes after tensor")
    return tensor


def encode_named_tensors(items: List[Tuple[str, Tensor]]) -> bytes:
    """Serialize (name, tensor) records into an ASLW blob."""
    seen = set()
    chunks = [ASLW_MAGIC, struct.pack("<BI", FORMAT_VERSION, len(items))]
    for name, tensor in items:
        if name in seen:
            raise WeightFileError(f"duplicate parameter name {name!r}")
        seen.add(name)
        raw_name = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(encode_tensor(tensor))
    return b"".join(chunks)


def decode_named_tensors(buffer: bytes) -> List[Tuple[str, Tensor]]:
    """Parse a full ASLW blob; raises WeightFileError on any defect."""
    if buffer[:4] != ASLW_MAGIC:
        raise WeightFileError(f"bad ASLW magic {bytes(buffer[:4])!r}")
    if len(buffer) < 9:
        raise WeightFileError("truncated ASLW header")
    version, count = struct.unpack_from("<BI", buffer, 4)
    if version != FORMAT_VERSION:
        raise WeightFileError(f"unsupported ASLW version {version}")

    offset = 9
    records: List[Tuple[str, Tensor]] = []
    seen = set()
    for index in range(count):
        if len(buffer) < offset + 2:
            raise WeightFileError(f"truncated ASLW record {index}")
        (name_len,) = struct.unpack_from("<H", buffer, offset)
        offset += 2
        if len(buffer) < offset + name_len:
            raise WeightFileError(f"truncated ASLW name in record {index}")
        try:
            name = bytes(buffer[offset:offset + name_len]).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"record {index}: name is not utf-8") from exc
        offset += name_len
        if name in seen:
            raise WeightFileError(f"duplicate parameter name {name!r}")
        seen.add(name)
        try:
            tensor, offset = decode_tensor(buffer, offset)
        except TensorFormatError as exc:
            raise WeightFileError(f"record {index} ({name}): {exc}") from exc
        records.append((name, tensor))

    if offset != len(buffer):
        raise WeightFileError(f"{len(buffer) - offset} trailing bytes after {count} records")
    return records
