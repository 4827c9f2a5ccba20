"""On-disk formats: HTF1 tensors, HTF1 archives and 8-bit PNG images.

HTF1 layout::

    b"HTF1" | u8 dtype code | u8 rank | rank x u64 LE extents | raw LE payload

An archive is ``b"HTFA" | u64 LE index length | JSON index | HTF1 blobs``;
the index maps each name to the byte offset and length of its blob,
relative to the first byte after the index.
"""
from __future__ import annotations

import io
import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import FormatError, MissingFileError

MAGIC = b"HTF1"
ARCHIVE_MAGIC = b"HTFA"

DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("u1"): 2,
    np.dtype("<i8"): 3,
}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}


def encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in DTYPE_CODES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if arr.ndim > 255:
        raise FormatError("rank too large for HTF1")
    head = MAGIC + struct.pack("<BB", DTYPE_CODES[dt], arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=dt).tobytes()


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise FormatError("not an HTF1 tensor (bad magic)")
    code, rank = struct.unpack_from("<BB", buf, 4)
    if code not in CODE_DTYPES:
        raise FormatError(f"unknown HTF1 dtype code {code}")
    off = 6 + 8 * rank
    if len(buf) < off:
        raise FormatError("truncated HTF1 header")
    shape = struct.unpack_from(f"<{rank}Q", buf, 6)
    dt = CODE_DTYPES[code]
    nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    if len(buf) != off + nbytes:
        raise FormatError(f"HTF1 payload is {len(buf) - off} bytes, expected {nbytes}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(shape).copy()


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".part")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _read(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    return path.read_bytes()


def save_tensor(arr: np.ndarray, path) -> None:
    _atomic_write(Path(path), encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(_read(path))


def save_archive(tensors: Mapping[str, np.ndarray], path) -> None:
    blobs, index, offset = [], {}, 0
    for name, arr in tensors.items():
        blob = encode_tensor(arr)
        index[name] = [offset, len(blob)]
        blobs.append(blob)
        offset += len(blob)
    idx = json.dumps(index, separators=(",", ":")).encode()
    _atomic_write(Path(path), ARCHIVE_MAGIC + struct.pack("<Q", len(idx)) + idx + b"".join(blobs))


def load_archive(path) -> dict[str, np.ndarray]:
    buf = _read(path)
    if buf[:4] != ARCHIVE_MAGIC or len(buf) < 12:
        raise FormatError(f"{path}: not an HTF1 archive")
    (n,) = struct.unpack_from("<Q", buf, 4)
    try:
        index = json.loads(buf[12 : 12 + n])
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt archive index") from exc
    base = 12 + n
    out = {}
    for name, (off, length) in index.items():
        out[name] = decode_tensor(buf[base + off : base + off + length])
    return out


# -----------------------------------------------------------------------------
# images
# -----------------------------------------------------------------------------
def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: np.ndarray, path) -> None:
    """Write a (3, H, W) or (H, W) array with values in [0, 1] as an 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[0] == 1:
            pil = Image.fromarray(to_uint8(img[0]), mode="L")
        elif img.shape[0] == 3:
            pil = Image.fromarray(to_uint8(img.transpose(1, 2, 0)), mode="RGB")
        else:
            raise FormatError(f"cannot save image with {img.shape[0]} channels")
    elif img.ndim == 2:
        pil = Image.fromarray(to_uint8(img), mode="L")
    else:
        raise FormatError(f"cannot save array of shape {img.shape} as image")
    bio = io.BytesIO()
    pil.save(bio, format="PNG")
    _atomic_write(Path(path), bio.getvalue())


def load_image(path, gray: bool = False) -> np.ndarray:
    """Read a PNG into a float array in [0, 1]: (3, H, W) for RGB, (H, W) if ``gray``."""
    buf = _read(path)
    if not buf.startswith(b"\x89PNG\r\n\x1a\n"):
        raise FormatError(f"{path}: unsupported image format (PNG expected)")
    try:
        with Image.open(io.BytesIO(buf)) as pil:
            pil.load()
            if gray:
                if pil.mode == "I;16" or pil.mode == "I":
                    arr = np.asarray(pil, dtype=np.float64)
                    return arr / (65535.0 if arr.max() > 255 else 255.0)
                return np.asarray(pil.convert("L"), dtype=np.float64) / 255.0
            arr = np.asarray(pil.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError, SyntaxError) as exc:
        raise FormatError(f"{path}: truncated or corrupt PNG ({exc})") from exc
    return arr.transpose(2, 0, 1).copy()
