"""Synthetic shapes dataset: generation, captions, loading, resizing.

Scenes are one flat-colored shape (circle / square / triangle) on an
achromatic background. Images render at a master resolution divisible by
the training buckets so downsampling is exact box averaging, and every
caption is a pure function of the scene, which is what makes the
pixel-statistics probe a usable oracle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .ppm import read_ppm, write_ppm
from .rng import Rng
from .textcond import CaptionRecord, reverse_tokens

COLORS: dict[str, tuple[float, float, float]] = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.10, 0.72, 0.18),
    "blue": (0.12, 0.22, 0.88),
    "yellow": (0.92, 0.85, 0.10),
    "magenta": (0.82, 0.12, 0.80),
    "cyan": (0.10, 0.78, 0.80),
}

BACKGROUNDS: dict[str, tuple[float, float, float]] = {
    "white": (0.95, 0.95, 0.95),
    "gray": (0.55, 0.55, 0.55),
    "black": (0.08, 0.08, 0.08),
}

SHAPES = ("circle", "square", "triangle")
SIZE_WORDS = ("medium", "large")


@dataclass
class SyntheticSpec:
    n_images: int = 256
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[str, ...] = tuple(COLORS)
    backgrounds: tuple[str, ...] = tuple(BACKGROUNDS)
    sizes: tuple[float, ...] = (0.55, 0.70)  # shape radius as fraction of half-side
    seed: int = 7
    image_px: int = 96
    jitter_frac: float = 1.0 / 24.0  # max center offset as fraction of side


@dataclass
class Scene:
    shape: str
    color: str
    background: str
    size: float
    size_word: str
    dx: float  # center offset in units of image side
    dy: float


def sample_scene(spec: SyntheticSpec, rng: Rng) -> Scene:
    si = rng.choice(len(spec.sizes))
    j = spec.jitter_frac
    return Scene(
        shape=spec.shapes[rng.choice(len(spec.shapes))],
        color=spec.colors[rng.choice(len(spec.colors))],
        background=spec.backgrounds[rng.choice(len(spec.backgrounds))],
        size=spec.sizes[si],
        size_word=SIZE_WORDS[si % len(SIZE_WORDS)],
        dx=(float(rng.uniform(())) * 2.0 - 1.0) * j,
        dy=(float(rng.uniform(())) * 2.0 - 1.0) * j,
    )


def render_scene(scene: Scene, px: int) -> np.ndarray:
    """Rasterize a scene at px x px; pure function of (scene, px)."""
    yy, xx = np.mgrid[0:px, 0:px].astype(np.float32) + 0.5
    cy = px * (0.5 + scene.dy)
    cx = px * (0.5 + scene.dx)
    r = scene.size * px / 2.0
    if scene.shape == "circle":
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    elif scene.shape == "square":
        s = r * 0.886  # comparable area to the circle
        mask = (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    elif scene.shape == "triangle":
        cr = r * 1.25  # circumradius; equilateral, point-up
        v = np.array(
            [
                [cx, cy - cr],
                [cx + cr * np.sqrt(3) / 2, cy + cr / 2],
                [cx - cr * np.sqrt(3) / 2, cy + cr / 2],
            ],
            dtype=np.float32,
        )
        mask = np.ones((px, px), dtype=bool)
        for i in range(3):
            x0, y0 = v[i]
            x1, y1 = v[(i + 1) % 3]
            # inside = consistent cross-product side for y-down coordinates
            mask &= (xx - x0) * (y1 - y0) - (yy - y0) * (x1 - x0) <= 0
    else:
        raise DataError(f"fflow.data: unknown shape {scene.shape!r}")
    img = np.empty((px, px, 3), dtype=np.float32)
    img[:] = np.asarray(BACKGROUNDS[scene.background], dtype=np.float32)
    img[mask] = np.asarray(COLORS[scene.color], dtype=np.float32)
    return img


def captions_for(scene: Scene) -> CaptionRecord:
    """Three caption lengths, both language slots; pure function of the scene."""
    short = f"{scene.color} {scene.shape}"
    middle = f"a {scene.color} {scene.shape} on a {scene.background} background"
    long = (
        f"the image shows one {scene.size_word} {scene.color} {scene.shape} "
        f"drawn flat on a plain {scene.background} background"
    )
    en = {"short": short, "middle": middle, "long": long}
    zh = {k: reverse_tokens(v) for k, v in en.items()}
    return CaptionRecord({"en": en, "zh": zh})


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Path:
    """Write images/ (PPM P6) + captions.jsonl + meta.txt; byte-deterministic."""
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    rng = Rng(spec.seed)
    lines: list[str] = []
    for i in range(spec.n_images):
        scene = sample_scene(spec, rng.split("scene", i))
        img = render_scene(scene, spec.image_px)
        image_id = f"img_{i:05d}"
        write_ppm(img_dir / f"{image_id}.ppm", img)
        record = captions_for(scene)
        for lang in ("en", "zh"):
            for length in ("short", "middle", "long"):
                lines.append(json.dumps(
                    {"id": image_id, "lang": lang, "length": length,
                     "text": record.get(lang, length)}
                ))
    (out / "captions.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""))
    (out / "meta.txt").write_text(
        f"n_images = {spec.n_images}\nimage_px = {spec.image_px}\nseed = {spec.seed}\n"
    )
    return out


# ---- resizing ----


def box_downsample(img: np.ndarray, factor: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise DataError(f"fflow.data: box_downsample factor {factor} does not divide {h}x{w}")
    return img.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3)).astype(
        np.float32
    )


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Standard bilinear resampling with pixel-center alignment."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.astype(np.float32).copy()
    ys = (np.arange(out_h, dtype=np.float32) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float32) + 0.5) * (w / out_w) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(np.int64)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0).astype(np.float32)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0).astype(np.float32)[None, :, None]
    a = img[y0][:, x0]
    b = img[y0][:, x1]
    c = img[y1][:, x0]
    d = img[y1][:, x1]
    top = a * (1 - wx) + b * wx
    bot = c * (1 - wx) + d * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Exact box averaging when the factors divide evenly, else bilinear."""
    h, w = img.shape[:2]
    if h % out_h == 0 and w % out_w == 0 and h // out_h == w // out_w:
        return box_downsample(img, h // out_h)
    return bilinear_resize(img, out_h, out_w)


# ---- loading ----


class ShapesDataset:
    """Reads a generated dataset directory; caches resized images."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest = self.root / "captions.jsonl"
        if not manifest.exists():
            raise DataError(f"fflow.data: no captions.jsonl under {self.root!s}")
        texts: dict[str, dict[str, dict[str, str]]] = {}
        for line in manifest.read_text().splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            texts.setdefault(rec["id"], {}).setdefault(rec["lang"], {})[rec["length"]] = rec["text"]
        self.ids = sorted(texts)
        self.records = {k: CaptionRecord(v) for k, v in texts.items()}
        self._raw_cache: dict[str, np.ndarray] = {}
        self._resized: dict[tuple[str, int, int], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.ids)

    def raw_image(self, idx: int) -> np.ndarray:
        image_id = self.ids[idx]
        if image_id not in self._raw_cache:
            self._raw_cache[image_id] = read_ppm(self.root / "images" / f"{image_id}.ppm")
        return self._raw_cache[image_id]

    def image(self, idx: int, res: tuple[int, int]) -> np.ndarray:
        key = (self.ids[idx], res[0], res[1])
        if key not in self._resized:
            self._resized[key] = resize_image(self.raw_image(idx), res[0], res[1])
        return self._resized[key]

    def caption_record(self, idx: int) -> CaptionRecord:
        return self.records[self.ids[idx]]
