"""File formats: LRRT raw tensors, binary PGM images, atomic writes."""
from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

LRRT_MAGIC = b"LRRT"
LRRT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def tensor_to_bytes(arr) -> bytes:
    """Encode: ``LRRT``, u8 version, u8 dtype (0=f32, 1=f64), u8 rank, u32 LE extents, row-major payload."""
    arr = np.asarray(arr)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float64)
    code = _CODES[arr.dtype]
    if arr.ndim > 255:
        raise ValueError("rank too large for LRRT")
    head = LRRT_MAGIC + struct.pack("<BBB", LRRT_VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def tensor_from_bytes(raw: bytes) -> np.ndarray:
    if raw[:4] != LRRT_MAGIC:
        raise ValueError(f"not an LRRT tensor (magic {raw[:4]!r})")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != LRRT_VERSION:
        raise ValueError(f"unsupported LRRT version {version}")
    if code not in _DTYPES:
        raise ValueError(f"unknown LRRT dtype code {code}")
    shape = struct.unpack(f"<{rank}I", raw[7 : 7 + 4 * rank])
    dt = _DTYPES[code]
    start = 7 + 4 * rank
    count = int(np.prod(shape)) if rank else 1
    payload = raw[start : start + count * dt.itemsize]
    if len(payload) != count * dt.itemsize:
        raise ValueError(f"truncated LRRT payload: expected {count * dt.itemsize} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr):
    atomic_write_bytes(path, tensor_to_bytes(arr))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def atomic_write_bytes(path, data: bytes):
    """Write via a temporary file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def to_uint8(img) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def pgm_bytes(img8: np.ndarray) -> bytes:
    img8 = np.asarray(img8)
    if img8.dtype != np.uint8 or img8.ndim != 2:
        raise ValueError(f"PGM output needs a 2-D uint8 array, got {img8.dtype} {img8.shape}")
    h, w = img8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img8.tobytes()


def write_pgm(path, img8):
    atomic_write_bytes(path, pgm_bytes(img8))


def _pgm_tokens(raw: bytes, count: int, pos: int):
    tokens = []
    while len(tokens) < count:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit binary (P5) PGM as a uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM files are supported")
    (w, h, maxval), pos = _pgm_tokens(raw, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w).copy()


def load_image(path) -> np.ndarray:
    """Grey-level image scaled to [0, 1] by dividing by 255.0."""
    return read_pgm(path).astype(np.float64) / 255.0
