"""Run configuration: desk-scale defaults, flat key=value files, overrides.

Config files are flat ``key = value`` lines (``#`` comments allowed). Keys
are dotted paths like ``data.n_images`` or ``dit2.steps``; every key has a
CLI flag of the same name, and flags override file values. ``dump_flat``
of the resolved config is what lands in each run's ``run.txt``.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import SyntheticSpec
from .dit import DiTConfig
from .errors import ConfigError
from .featurizer import FeaturizerConfig
from .flow import LossConfig, SampleConfig
from .pipeline import StageConfig


def _ae_stages() -> list[StageConfig]:
    return [
        StageConfig(
            name="ae1", kind="ae", anchor_resolution=32, resolutions=((32, 32),),
            steps=300, batch=8, lr=1e-4, betas=(0.5, 0.9), dataset_id="A",
        ),
        StageConfig(
            name="ae2", kind="ae", anchor_resolution=48,
            resolutions=((32, 32), (48, 48)),
            steps=300, batch=8, lr=1e-4, betas=(0.5, 0.9), dataset_id="B",
        ),
    ]


def _dit_stages() -> list[StageConfig]:
    common = dict(kind="dit", batch=16, lr=2e-4, betas=(0.9, 0.95))
    return [
        StageConfig(
            name="dit1", anchor_resolution=32, resolutions=((32, 32),),
            steps=800, max_text_len=256, dataset_id="C",
            caption_ratios=(0.10, 0.35, 0.55), **common,
        ),
        StageConfig(
            name="dit2", anchor_resolution=32,
            resolutions=((32, 32), (48, 32), (32, 48)),
            steps=500, max_text_len=256, dataset_id="C",
            caption_ratios=(0.10, 0.35, 0.55), **common,
        ),
        StageConfig(
            name="dit3", anchor_resolution=48,
            resolutions=((48, 48), (48, 32), (32, 48)),
            steps=400, max_text_len=256, dataset_id="D",
            caption_ratios=(0.10, 0.35, 0.55), **common,
        ),
        StageConfig(
            name="dit4", anchor_resolution=48, resolutions=((48, 48),),
            steps=300, max_text_len=512, dataset_id="E",
            caption_ratios=(0.0, 0.0, 1.0), **common,
        ),
    ]


@dataclass
class RunConfig:
    seed: int = 7
    ae_mode: str = "P"
    lambda_dm: float = 0.05
    sample_width: int = 48
    sample_height: int = 48
    sample_count: int = 4
    stats_resolution: int = 32
    analyze_images: int = 4
    analyze_resolutions: tuple[int, ...] = (32, 64)
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    feat: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    dit: DiTConfig = field(default_factory=DiTConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    ae_stages: list[StageConfig] = field(default_factory=_ae_stages)
    dit_stages: list[StageConfig] = field(default_factory=_dit_stages)

    def stages_by_name(self) -> dict[str, StageConfig]:
        return {s.name: s for s in self.ae_stages + self.dit_stages}


def default_config() -> RunConfig:
    return RunConfig()


# ---- flat key <-> object mapping ----

_SCALAR_KEYS = (
    "seed", "ae_mode", "lambda_dm", "sample_width", "sample_height",
    "sample_count", "stats_resolution", "analyze_images", "analyze_resolutions",
)
_SECTION_ATTRS = {"data": "data", "feat": "feat", "dit": "dit", "loss": "loss",
                  "sample": "sample"}


def _format_value(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (tuple, list)):
        if v and isinstance(v[0], (tuple, list)):
            return ",".join(f"{a}x{b}" for a, b in v)
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_like(current, raw: str):
    raw = raw.strip()
    if isinstance(current, bool):
        return bool(int(raw))
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    if isinstance(current, (tuple, list)):
        if current and isinstance(current[0], (tuple, list)):
            out = []
            for part in raw.split(","):
                h, _, w = part.strip().partition("x")
                out.append((int(h), int(w)))
            return tuple(out)
        elem = current[0] if current else 1.0
        return tuple(_parse_like(elem, p) for p in raw.split(","))
    raise ConfigError(f"fflow.config: cannot parse value for type {type(current)}")


def flat_items(cfg: RunConfig) -> list[tuple[str, str]]:
    items: list[tuple[str, str]] = []
    for key in _SCALAR_KEYS:
        items.append((key, _format_value(getattr(cfg, key))))
    for section, attr in _SECTION_ATTRS.items():
        obj = getattr(cfg, attr)
        for f in fields(obj):
            items.append((f"{section}.{f.name}", _format_value(getattr(obj, f.name))))
    for stage in cfg.ae_stages + cfg.dit_stages:
        for f in fields(stage):
            if f.name in ("name", "kind"):
                continue
            items.append((f"{stage.name}.{f.name}", _format_value(getattr(stage, f.name))))
    return items


def dump_flat(cfg: RunConfig) -> str:
    return "\n".join(f"{k} = {v}" for k, v in flat_items(cfg)) + "\n"


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    if key in _SCALAR_KEYS:
        setattr(cfg, key, _parse_like(getattr(cfg, key), raw))
        return
    section, _, attr = key.partition(".")
    if not attr:
        raise ConfigError(f"fflow.config: unknown key {key!r}")
    if section in _SECTION_ATTRS:
        obj = getattr(cfg, _SECTION_ATTRS[section])
        if not hasattr(obj, attr):
            raise ConfigError(f"fflow.config: unknown key {key!r}")
        setattr(obj, attr, _parse_like(getattr(obj, attr), raw))
        return
    stages = cfg.stages_by_name()
    if section in stages:
        stage = stages[section]
        if not hasattr(stage, attr) or attr in ("name", "kind"):
            raise ConfigError(f"fflow.config: unknown key {key!r}")
        setattr(stage, attr, _parse_like(getattr(stage, attr), raw))
        return
    raise ConfigError(f"fflow.config: unknown key {key!r}")


def validate(cfg: RunConfig) -> RunConfig:
    """Re-run every dataclass's validation after raw attribute writes."""
    cfg.data = replace(cfg.data)
    cfg.feat = replace(cfg.feat)
    cfg.dit = replace(cfg.dit)
    cfg.loss = replace(cfg.loss)
    cfg.sample = replace(cfg.sample)
    cfg.ae_stages = [replace(s) for s in cfg.ae_stages]
    cfg.dit_stages = [replace(s) for s in cfg.dit_stages]
    return cfg


def load_config(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = default_config()
    if path is not None:
        for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"fflow.config: {path!s}:{ln}: expected 'key = value'")
            k, v = line.split("=", 1)
            set_key(cfg, k.strip(), v.strip())
    for k, v in (overrides or {}).items():
        set_key(cfg, k, v)
    return validate(cfg)


def worker_count(default: int = 1) -> int:
    """Worker-parallelism cap from the FFLOW_THREADS environment variable."""
    raw = os.environ.get("FFLOW_THREADS", "")
    if not raw:
        return default
    try:
        n = int(raw)
    except ValueError as e:
        raise ConfigError(f"fflow.config: FFLOW_THREADS={raw!r} is not an integer") from e
    return max(1, n)
