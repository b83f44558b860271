"""Binary PPM (P6, maxval 255) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path: str | Path, img: np.ndarray) -> None:
    """Write an [H, W, 3] float image in [0, 1] (or uint8) as binary P6."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"fflow.ppm: expected [H, W, 3], got {img.shape}")
    u8 = img if img.dtype == np.uint8 else to_u8(img)
    h, w = u8.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(u8.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read binary P6 into float32 [H, W, 3] in [0, 1]."""
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise DataError(f"fflow.ppm: {path!s} is not a binary PPM")
    # header = magic, width, height, maxval; whitespace/comment separated
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        fields.append(data[i:j])
        i = j
    i += 1  # single whitespace after maxval
    w, h, maxval = int(fields[0]), int(fields[1]), int(fields[2])
    if maxval != 255:
        raise DataError(f"fflow.ppm: only maxval 255 supported, got {maxval}")
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=i)
    return raw.reshape(h, w, 3).astype(np.float32) / np.float32(255.0)
