"""Feature-space diagnostics: PCA token visualization, cross-resolution
cosine similarity, and reconstruction PSNR.

The cross-resolution report encodes one image at several resolutions,
average-pools the finer token grid down to the coarser one, and averages
per-token cosine similarity. Scale-invariant encoders score exactly 1;
patch featurizers whose features shift with scale score below 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import bilinear_resize
from .errors import DataError, ShapeError
from .featurizer import LatentGrid


@dataclass
class SimilarityReport:
    resolutions: list[tuple[int, int]]
    matrix: np.ndarray  # [n, n] pairwise mean cosine similarity
    encoder_id: str

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        n = len(self.resolutions)
        if m.shape != (n, n):
            raise ShapeError(f"fflow.analysis: matrix shape {m.shape} != ({n}, {n})")
        if not np.allclose(m, m.T):
            raise DataError("fflow.analysis: similarity matrix not symmetric")
        if np.abs(np.diag(m) - 1.0).max() > 1e-6:
            raise DataError("fflow.analysis: similarity diagonal must be 1")
        if m.min() < -1.0 - 1e-9 or m.max() > 1.0 + 1e-9:
            raise DataError("fflow.analysis: similarities outside [-1, 1]")
        self.matrix = m

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["res_a", "res_b", "cosine"])
            for i, ra in enumerate(self.resolutions):
                for j, rb in enumerate(self.resolutions):
                    w.writerow([f"{ra[0]}x{ra[1]}", f"{rb[0]}x{rb[1]}",
                                f"{self.matrix[i, j]:.6f}"])


def pca_rgb(features: LatentGrid) -> np.ndarray:
    """Top-3 principal components of the token matrix as an RGB image.

    Components are min-max scaled to [0, 1]; a zero-variance component maps
    to a constant 0 channel. PCA is fitted per image.
    """
    rows, cols = features.rows, features.cols
    if rows * cols < 3:
        raise DataError(f"fflow.analysis: need >= 3 tokens for PCA, got {rows * cols}")
    tokens = features.data.data.reshape(rows * cols, features.d).astype(np.float64)
    centered = tokens - tokens.mean(axis=0, keepdims=True)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = centered @ vt[:3].T  # [N, <=3]
    if comps.shape[1] < 3:
        comps = np.pad(comps, ((0, 0), (0, 3 - comps.shape[1])))
    img = np.zeros((rows * cols, 3), dtype=np.float32)
    lead = float(s[0]) if s.size else 0.0
    for c in range(3):
        # zero-variance guard is relative to the leading component: numerical
        # dust in a rank-deficient decomposition must not stretch to [0, 1]
        if c >= s.size or s[c] <= 1e-5 * lead or lead == 0.0:
            continue
        v = comps[:, c]
        img[:, c] = ((v - v.min()) / (v.max() - v.min())).astype(np.float32)
    return img.reshape(rows, cols, 3)


def pool_tokens(grid: np.ndarray, out_rows: int, out_cols: int) -> np.ndarray:
    """Average-pool a token grid [r, c, d] down to [out_rows, out_cols, d].

    Integer factors reduce to exact block means; otherwise cells are
    combined with area-overlap weights.
    """
    r, c, d = grid.shape
    if r == out_rows and c == out_cols:
        return grid
    if r % out_rows == 0 and c % out_cols == 0:
        fr, fc = r // out_rows, c // out_cols
        return grid.reshape(out_rows, fr, out_cols, fc, d).mean(axis=(1, 3))

    def weights(n_in: int, n_out: int) -> np.ndarray:
        w = np.zeros((n_out, n_in))
        scale = n_in / n_out
        for i in range(n_out):
            lo, hi = i * scale, (i + 1) * scale
            for j in range(int(np.floor(lo)), int(np.ceil(hi))):
                w[i, j] = min(hi, j + 1) - max(lo, j)
        return w / w.sum(axis=1, keepdims=True)

    wr = weights(r, out_rows)
    wc = weights(c, out_cols)
    return np.einsum("ir,jc,rcd->ijd", wr, wc, grid)


def _mean_token_cosine(a: np.ndarray, b: np.ndarray) -> float:
    """Mean over tokens of per-token cosine; identical grids score exactly 1."""
    if np.array_equal(a, b):
        return 1.0
    at = a.reshape(-1, a.shape[-1]).astype(np.float64)
    bt = b.reshape(-1, b.shape[-1]).astype(np.float64)
    dots = (at * bt).sum(axis=1)
    na = np.linalg.norm(at, axis=1)
    nb = np.linalg.norm(bt, axis=1)
    cos = dots / np.maximum(na * nb, 1e-12)
    return float(np.clip(cos, -1.0, 1.0).mean())


def cross_res_cosine(
    encoder,
    img: np.ndarray,
    resolutions: list[int | tuple[int, int]],
    encoder_id: str = "encoder",
    patch: int = 16,
) -> SimilarityReport:
    """Encode `img` at each resolution and compare grids pairwise.

    The higher-resolution grid is pooled down to the lower one's (rows,
    cols) before the per-token cosine. `encoder` maps an image to a
    LatentGrid; `img` is bilinearly resized to each requested resolution.
    """
    res_list = [(r, r) if isinstance(r, int) else tuple(r) for r in resolutions]
    for h, w in res_list:
        if h % patch or w % patch:
            raise DataError(f"fflow.analysis: resolution {h}x{w} not divisible by {patch}")
    grids = []
    for h, w in res_list:
        resized = bilinear_resize(np.asarray(img, dtype=np.float32), h, w)
        grids.append(encoder(resized).data.data)
    n = len(res_list)
    matrix = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            gi, gj = grids[i], grids[j]
            # pool the finer grid onto the coarser one
            if gi.shape[0] * gi.shape[1] >= gj.shape[0] * gj.shape[1]:
                big, small = gi, gj
            else:
                big, small = gj, gi
            pooled = pool_tokens(big, small.shape[0], small.shape[1])
            matrix[i, j] = matrix[j, i] = _mean_token_cosine(pooled, small)
    return SimilarityReport(res_list, matrix, encoder_id)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; equal images give +inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"fflow.analysis: psnr shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)
