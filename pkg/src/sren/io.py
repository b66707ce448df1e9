"""SRTN tensor files and 8-bit PGM previews.

SRTN layout: b"SRTN", u32 LE version (1), u8 dtype (0=f32, 1=f64), u8 ndim,
ndim x u64 LE dims, then the row-major little-endian payload.
"""

import struct
from pathlib import Path

import numpy as np

from sren.errors import InvalidArgument

MAGIC = b"SRTN"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def to_real(arr: np.ndarray) -> np.ndarray:
    """Complex arrays gain a leading axis of size 2 holding (re, im)."""
    arr = np.asarray(arr)
    if np.iscomplexobj(arr):
        return np.stack([arr.real, arr.imag])
    return arr


def write_srtn(path, arr, dtype="f64") -> None:
    arr = to_real(arr)
    code = {"f32": 0, "f64": 1}[dtype]
    payload = np.asarray(arr, dtype=_DTYPES[code], order="C")
    header = MAGIC + struct.pack("<IBB", VERSION, code, payload.ndim)
    header += struct.pack(f"<{payload.ndim}Q", *payload.shape)
    Path(path).write_bytes(header + payload.tobytes())


def read_srtn(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise InvalidArgument(f"{path}: not an SRTN file")
    version, code, ndim = struct.unpack_from("<IBB", raw, 4)
    if version != VERSION or code not in _DTYPES:
        raise InvalidArgument(f"{path}: unsupported SRTN version {version} / dtype {code}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 10)
    offset = 10 + 8 * ndim
    dt = _DTYPES[code]
    count = int(np.prod(dims)) if ndim else 1
    if len(raw) - offset != count * dt.itemsize:
        raise InvalidArgument(f"{path}: payload size does not match header")
    return np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(dims).astype(dt.newbyteorder("="))


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 PGM from a 2D uint8 array."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise InvalidArgument("PGM preview must be 2D")
    img = img.astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a P5 or P2 PGM; returns float64 values scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InvalidArgument(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos].decode("ascii"))
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == "P5":
        dt = np.uint8 if maxval < 256 else np.dtype(">u2")
        data = np.frombuffer(raw, dtype=dt, count=w * h, offset=pos + 1)
    elif magic == "P2":
        data = np.array(raw[pos:].split()[: w * h], dtype=np.float64)
    else:
        raise InvalidArgument(f"{path}: unsupported PGM magic {magic!r}")
    if data.size != w * h:
        raise InvalidArgument(f"{path}: truncated PGM payload")
    return data.reshape(h, w).astype(np.float64) / maxval


def to_uint8(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    scaled = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.round(scaled * 255.0), 0, 255).astype(np.uint8)
