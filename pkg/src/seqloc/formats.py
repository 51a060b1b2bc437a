"""Binary file formats: PGM P5 images and the SLFM float-map container.

SLFM layout: magic "SLFM", u16 version (=1), u32 height, u32 width,
u32 channels, then float32 little-endian values, row-major, channel-last.
All integers little-endian.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptDataset

SLFM_MAGIC = b"SLFM"
SLFM_VERSION = 1


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write a grayscale uint8 image as binary PGM (P5, maxval 255)."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM writer expects a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(image.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary PGM (P5) file into a uint8 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorruptDataset(f"{path}: {e}") from e
    if not data.startswith(b"P5"):
        raise CorruptDataset(f"{path}: not a binary PGM (P5) file")

    # Header: magic, width, height, maxval, separated by whitespace.
    # '#' starts a comment running to end of line.
    pos = 2
    fields: list[int] = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            nl = data.find(b"\n", pos)
            pos = len(data) if nl < 0 else nl + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptDataset(f"{path}: truncated PGM header")
        try:
            fields.append(int(data[start:pos]))
        except ValueError as e:
            raise CorruptDataset(f"{path}: bad PGM header field") from e
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise CorruptDataset(f"{path}: unsupported PGM maxval {maxval}")
    pixels = data[pos : pos + w * h]
    if len(pixels) != w * h:
        raise CorruptDataset(f"{path}: truncated PGM payload")
    return np.frombuffer(pixels, dtype=np.uint8).reshape(h, w).copy()


def write_slfm(path: str | Path, array: np.ndarray) -> None:
    """Write an H x W x C float map (or H x W, taken as C=1)."""
    array = np.asarray(array, dtype=np.float32)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError("SLFM writer expects an H x W x C array")
    h, w, c = array.shape
    with open(path, "wb") as f:
        f.write(SLFM_MAGIC)
        f.write(struct.pack("<HIII", SLFM_VERSION, h, w, c))
        f.write(array.astype("<f4").tobytes())


def read_slfm(path: str | Path) -> np.ndarray:
    """Read an SLFM file into an H x W x C float32 array."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CorruptDataset(f"{path}: {e}") from e
    header = struct.calcsize("<HIII")
    if len(data) < 4 + header or data[:4] != SLFM_MAGIC:
        raise CorruptDataset(f"{path}: not an SLFM file")
    version, h, w, c = struct.unpack("<HIII", data[4 : 4 + header])
    if version != SLFM_VERSION:
        raise CorruptDataset(f"{path}: unsupported SLFM version {version}")
    payload = data[4 + header :]
    expected = h * w * c * 4
    if len(payload) != expected:
        raise CorruptDataset(
            f"{path}: SLFM payload is {len(payload)} bytes, expected {expected}"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(h, w, c).copy()
