"""Pixel-statistics caption probe.

Checks a decoded or dataset image against its caption with two independent
measurements: the dominant foreground color (nearest palette entry to the
mean foreground RGB) and the shape's corner count, read off the boundary's
radial profile (local maxima of radius vs angle around the centroid: 3 ->
triangle, 4 -> square, otherwise circle). The probe never sees model
internals, so it stays an oracle for generated images.
"""

from __future__ import annotations

import numpy as np

from .data import COLORS, SHAPES
from .errors import DataError

N_ANGLE_BINS = 72
FLATNESS_GATE = 1.07  # profiles peaking below this are circles
PEAK_KEEP_FRACTION = 0.3  # corners must reach this fraction of the peak excess
FG_MIN_CONTRAST = 0.12  # below this max-channel contrast nothing is foreground


def foreground_mask(img: np.ndarray) -> np.ndarray:
    """Pixels that differ clearly from the border (background) color.

    The cut sits at half the image's peak contrast, i.e. the 50% level set:
    antialiased boundary pixels then split symmetrically, which keeps the
    mask boundary smooth regardless of how strong the color contrast is.
    """
    img = np.asarray(img, dtype=np.float32)
    border = np.concatenate(
        [img[0, :, :], img[-1, :, :], img[:, 0, :], img[:, -1, :]], axis=0
    )
    bg = np.median(border, axis=0)
    dist = np.abs(img - bg).max(axis=-1)
    return dist > max(0.5 * float(dist.max()), FG_MIN_CONTRAST)


def dominant_color_name(img: np.ndarray, mask: np.ndarray | None = None) -> str:
    mask = foreground_mask(img) if mask is None else mask
    if mask.sum() < 8:
        raise DataError("fflow.probe: no usable foreground region")
    mean_rgb = np.asarray(img, dtype=np.float32)[mask].mean(axis=0)
    names = list(COLORS)
    dists = [np.linalg.norm(mean_rgb - np.asarray(COLORS[n])) for n in names]
    return names[int(np.argmin(dists))]


def radial_profile(mask: np.ndarray, bins: int = N_ANGLE_BINS) -> np.ndarray:
    """Max boundary radius per angle bin around the mask centroid, mean-normalized."""
    ys, xs = np.nonzero(mask)
    cy, cx = ys.mean(), xs.mean()
    dy, dx = ys - cy, xs - cx
    theta = np.arctan2(dy, dx)
    radius = np.hypot(dy, dx)
    idx = ((theta + np.pi) / (2 * np.pi) * bins).astype(np.int64) % bins
    prof = np.zeros(bins)
    np.maximum.at(prof, idx, radius)
    # fill empty bins from circular neighbors
    empty = prof == 0
    if empty.any():
        filled = np.nonzero(~empty)[0]
        if filled.size == 0:
            raise DataError("fflow.probe: degenerate mask")
        for b in np.nonzero(empty)[0]:
            nearest = filled[np.argmin(np.minimum((filled - b) % bins, (b - filled) % bins))]
            prof[b] = prof[nearest]
    prof = prof / prof.mean()
    kernel = np.array([1.0, 2.0, 3.0, 4.0, 3.0, 2.0, 1.0])
    kernel /= kernel.sum()
    padded = np.concatenate([prof[-3:], prof, prof[:3]])
    return np.convolve(padded, kernel, mode="valid")


def corner_count(mask: np.ndarray) -> int:
    """Number of prominent, evenly spaced radial peaks (shape corners).

    A near-flat profile counts as zero corners (circle). Otherwise the
    candidate peaks are local maxima above a low adaptive cut, and the
    count is the largest k in {4, 3} whose k strongest candidates are
    evenly spaced around the centroid; corners of real polygons are, while
    rasterization or decoder bumps are not.
    """
    prof = radial_profile(mask)
    bins = prof.size
    top = float(prof.max())
    if top < FLATNESS_GATE:
        return 0
    cut = 1.0 + PEAK_KEEP_FRACTION * (top - 1.0)
    cands: list[int] = []
    for b in np.argsort(prof)[::-1]:
        b = int(b)
        window = prof[[(b + o) % bins for o in range(-3, 4)]]
        if prof[b] >= window.max() and prof[b] >= cut:
            if not any(min((b - p) % bins, (p - b) % bins) < 8 for p in cands):
                cands.append(b)
    for k in (4, 3):
        if len(cands) < k:
            continue
        sel = sorted(cands[:k])
        gaps = np.diff(sel + [sel[0] + bins])
        expected = bins / k
        if np.abs(gaps - expected).max() <= 0.35 * expected:
            return k
    return 0


def classify_shape(mask: np.ndarray) -> str:
    n = corner_count(mask)
    if n == 3:
        return "triangle"
    if n == 4:
        return "square"
    return "circle"


def caption_terms(text: str) -> tuple[str | None, str | None]:
    """(color word, shape word) appearing in the caption, if any."""
    words = text.lower().split()
    color = next((w for w in words if w in COLORS), None)
    shape = next((w for w in words if w in SHAPES), None)
    return color, shape


def probe_image(img: np.ndarray, color_word: str, shape_word: str) -> bool:
    """True iff dominant hue and corner count both match the caption words."""
    try:
        mask = foreground_mask(img)
        if mask.sum() < 8:
            return False
        return (
            dominant_color_name(img, mask) == color_word
            and classify_shape(mask) == shape_word
        )
    except DataError:
        return False


def probe_text(img: np.ndarray, text: str) -> bool:
    color, shape = caption_terms(text)
    if color is None or shape is None:
        return False
    return probe_image(img, color, shape)
