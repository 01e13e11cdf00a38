"""Binary matrix (TSM1) and PNG file helpers."""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
from PIL import Image

TSM_MAGIC = b"TSM1"
# magic, rows, cols, reserved (keeps the payload 8-byte aligned)
_TSM_HEADER = struct.Struct("<4sIII")
TSM_HEADER_SIZE = _TSM_HEADER.size
_U32_MAX = 2**32 - 1


class FormatError(ValueError):
    """Malformed or truncated binary file."""


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def tsm_bytes(matrix: np.ndarray) -> bytes:
    m = np.asarray(matrix, dtype="<f8")
    if m.ndim != 2:
        raise FormatError(f"TSM holds 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    if rows > _U32_MAX or cols > _U32_MAX:
        raise FormatError(f"dimensions {rows}x{cols} overflow u32")
    return _TSM_HEADER.pack(TSM_MAGIC, rows, cols, 0) + np.ascontiguousarray(m).tobytes()


def save_tsm(path, matrix: np.ndarray) -> None:
    atomic_write_bytes(path, tsm_bytes(matrix))


def parse_tsm(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < TSM_HEADER_SIZE:
        raise FormatError(
            f"{name}: truncated header, expected {TSM_HEADER_SIZE} bytes, got {len(blob)}"
        )
    magic, rows, cols, _ = _TSM_HEADER.unpack_from(blob)
    if magic != TSM_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {TSM_MAGIC!r}")
    expected = TSM_HEADER_SIZE + rows * cols * 8
    if len(blob) != expected:
        raise FormatError(
            f"{name}: payload size mismatch for {rows}x{cols}, "
            f"expected {expected} bytes, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f8", offset=TSM_HEADER_SIZE, count=rows * cols)
    return data.reshape(rows, cols).astype(np.float64)


def load_tsm(path) -> np.ndarray:
    path = Path(path)
    return parse_tsm(path.read_bytes(), str(path))


def save_png(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected HxWx3 uint8 image, got {img.dtype} {img.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    Image.fromarray(img).save(tmp, format="PNG")
    os.replace(tmp, path)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
