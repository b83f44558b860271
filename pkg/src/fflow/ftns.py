"""FTNS1 raw tensor files and manifest-based weight directories.

File layout: magic bytes ``FTNS1\\n``, one ASCII header line with the rank
followed by the shape dims, ``\\n``, then the little-endian float32 payload.
Round-trips are bit-exact.

A weight group is a directory of FTNS1 files plus ``manifest.txt`` holding
one ``name file`` line per parameter, sorted by name.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import DataError
from .tensor import Tensor

MAGIC = b"FTNS1\n"


def save_tensor(path: str | os.PathLike, t: Tensor | np.ndarray) -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float32)
    arr = np.asarray(arr, dtype=np.float32)  # ascontiguousarray would promote 0-d to 1-d
    header = " ".join([str(arr.ndim)] + [str(s) for s in arr.shape])
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(header.encode("ascii") + b"\n")
        f.write(arr.astype("<f4", copy=False).tobytes())


def load_tensor(path: str | os.PathLike) -> Tensor:
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise DataError(f"fflow.ftns: bad magic in {path!s}")
        header = b""
        while not header.endswith(b"\n"):
            c = f.read(1)
            if not c:
                raise DataError(f"fflow.ftns: truncated header in {path!s}")
            header += c
        fields = header.decode("ascii").split()
        rank = int(fields[0])
        shape = tuple(int(v) for v in fields[1:])
        if len(shape) != rank:
            raise DataError(f"fflow.ftns: header rank/shape mismatch in {path!s}")
        count = int(np.prod(shape)) if shape else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise DataError(f"fflow.ftns: truncated payload in {path!s}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return Tensor(arr.copy())


def save_group(dirpath: str | os.PathLike, params: dict[str, Tensor | np.ndarray]) -> None:
    """Write a named weight group: one FTNS1 file per entry + manifest.txt."""
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, name in enumerate(sorted(params)):
        fname = f"{i:04d}.ftns"
        save_tensor(d / fname, params[name])
        lines.append(f"{name} {fname}")
    (d / "manifest.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def load_group(dirpath: str | os.PathLike, requires_grad: bool = False) -> dict[str, Tensor]:
    d = Path(dirpath)
    manifest = d / "manifest.txt"
    if not manifest.exists():
        raise DataError(f"fflow.ftns: missing manifest in {d!s}")
    params: dict[str, Tensor] = {}
    for line in manifest.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        name, fname = line.split()
        t = load_tensor(d / fname)
        t.requires_grad = requires_grad
        params[name] = t
    return params
