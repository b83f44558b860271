"""Command-line entry point.

Subcommands: gen-data, train-ae, fit-stats, train-dit, sample, analyze,
grad-check. Every config key is also a flag of the same (dotted) name and
flags override config-file values; each run writes the fully resolved
config plus seed to ``run.txt`` in its output directory. Exit codes:
0 success, 1 failed invariant (module-qualified message), 2 usage.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .analysis import SimilarityReport, cross_res_cosine, pca_rgb
from .autoencoder import Autoencoder, fit_latent_stats, load_autoencoder, save_autoencoder
from .checks import dit_grad_check, op_checks
from .config import RunConfig, dump_flat, flat_items, load_config
from .data import ShapesDataset, bilinear_resize, gen_synthetic
from .dit import DiTConfig
from .errors import ConfigError, DataError, FlowError
from .featurizer import Featurizer, FeaturizerConfig, pretrain_ssl
from .pipeline import TrainState, sample_images, save_checkpoint, load_checkpoint, train_autoencoder, train_t2i
from .ppm import write_ppm
from .rng import Rng
from .textcond import sample_caption

COMMANDS = ("gen-data", "train-ae", "fit-stats", "train-dit", "sample", "analyze", "grad-check")


def _add_common(sub: argparse.ArgumentParser, keys: list[str]) -> dict[str, str]:
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--out", help="output directory")
    dest_map: dict[str, str] = {}
    for i, key in enumerate(keys):
        dest = f"cfgkey_{i}"
        sub.add_argument(f"--{key}", dest=dest, metavar="V", help=argparse.SUPPRESS)
        dest_map[dest] = key
    return dest_map


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, str]]:
    keys = [k for k, _ in flat_items(cfgmod.default_config())]
    parser = argparse.ArgumentParser(
        prog="fflow",
        description="Text-to-image flow matching in a frozen visual-feature space.",
    )
    subs = parser.add_subparsers(dest="command", required=True)
    dest_map: dict[str, str] = {}

    sp = subs.add_parser("gen-data", help="generate the synthetic shapes dataset")
    dest_map |= _add_common(sp, keys)

    sp = subs.add_parser("train-ae", help="train decoder (and residual branch in R mode)")
    sp.add_argument("--data", required=True, help="dataset directory")
    dest_map |= _add_common(sp, keys)

    sp = subs.add_parser("fit-stats", help="fit latent normalization stats into a checkpoint")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True, help="input checkpoint directory")
    dest_map |= _add_common(sp, keys)

    sp = subs.add_parser("train-dit", help="run the staged velocity-model schedule")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", required=True)
    dest_map |= _add_common(sp, keys)

    sp = subs.add_parser("sample", help="sample images from a trained checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", help="dataset to draw prompts from (if no --prompt)")
    sp.add_argument("--prompt", action="append", help="caption text (repeatable)")
    sp.add_argument("--steps", type=int, help="alias for sample.steps")
    sp.add_argument("--cfg", type=float, help="alias for sample.cfg_scale")
    dest_map |= _add_common(sp, keys)

    sp = subs.add_parser("analyze", help="cross-resolution cosine report + PCA images")
    sp.add_argument("--data", required=True)
    sp.add_argument("--ckpt", help="checkpoint; omitted = deterministic featurizer")
    dest_map |= _add_common(sp, keys)

    sp = subs.add_parser("grad-check", help="finite-difference check of ops and the DiT")
    dest_map |= _add_common(sp, keys)

    return parser, dest_map


def _resolve_config(args, dest_map: dict[str, str]) -> RunConfig:
    overrides: dict[str, str] = {}
    for dest, key in dest_map.items():
        v = getattr(args, dest, None)
        if v is not None:
            overrides[key] = v
    if getattr(args, "steps", None) is not None:
        overrides["sample.steps"] = str(args.steps)
    if getattr(args, "cfg", None) is not None:
        overrides["sample.cfg_scale"] = str(args.cfg)
    return load_config(getattr(args, "config", None), overrides)


def _write_run_txt(out: Path, command: str, cfg: RunConfig) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.txt").write_text(f"command = {command}\n" + dump_flat(cfg))


def _build_ae(cfg: RunConfig) -> Autoencoder:
    rng = Rng(cfg.seed).split("ae_build")
    feat_weights = None
    if cfg.feat.kind == "learned":
        raise ConfigError(
            "fflow.cli: learned featurizer checkpoints must be pretrained via the "
            "library API (fflow.featurizer.pretrain_ssl); the CLI defaults to the "
            "deterministic featurizer"
        )
    return Autoencoder.build(rng, mode=cfg.ae_mode, feat_cfg=cfg.feat,
                             feat_weights=feat_weights)


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out or "dataset")
    _write_run_txt(out, "gen-data", cfg)
    gen_synthetic(cfg.data, out)
    print(f"wrote {cfg.data.n_images} images under {out}")
    return 0


def cmd_train_ae(args, cfg: RunConfig) -> int:
    out = Path(args.out or "run_ae")
    _write_run_txt(out, "train-ae", cfg)
    dataset = ShapesDataset(args.data)
    ae = _build_ae(cfg)
    state = TrainState(cfg.seed, dataset, ae, loss_cfg=cfg.loss, lambda_dm=cfg.lambda_dm)
    train_autoencoder(cfg.ae_stages, state, out)
    save_autoencoder(out / "ckpt", ae)
    (out / "ckpt" / "meta.txt").write_text(
        f"seed = {cfg.seed}\nrng_seed = {cfg.seed}\nkind = ae\nstage = {cfg.ae_stages[-1].name}\n"
        f"next_step = {cfg.ae_stages[-1].steps}\nopt_t = 0\n"
    )
    print(f"autoencoder checkpoint at {out / 'ckpt'}")
    return 0


def cmd_fit_stats(args, cfg: RunConfig) -> int:
    out = Path(args.out or "run_stats")
    _write_run_txt(out, "fit-stats", cfg)
    dataset = ShapesDataset(args.data)
    ae = load_autoencoder(args.ckpt)
    res = (cfg.stats_resolution, cfg.stats_resolution)
    corpus = [dataset.image(i, res) for i in range(len(dataset))]
    ae.stats = fit_latent_stats(corpus, ae.encode)
    save_autoencoder(out / "ckpt", ae)
    (out / "ckpt" / "meta.txt").write_text(
        f"seed = {cfg.seed}\nrng_seed = {cfg.seed}\nkind = ae\nstage = stats\nnext_step = 0\nopt_t = 0\n"
    )
    print(f"stats written into {out / 'ckpt'}")
    return 0


def cmd_train_dit(args, cfg: RunConfig) -> int:
    out = Path(args.out or "run_dit")
    _write_run_txt(out, "train-dit", cfg)
    dataset = ShapesDataset(args.data)
    ae = load_autoencoder(args.ckpt)
    if ae.stats is None:
        raise DataError("fflow.cli: checkpoint has no latent stats; run fit-stats first")
    state = TrainState(cfg.seed, dataset, ae, loss_cfg=cfg.loss, lambda_dm=cfg.lambda_dm)
    dit_cfg = cfg.dit
    if dit_cfg.z_dim != ae.latent_dim:
        dit_cfg = DiTConfig(
            dim=dit_cfg.dim, layers=dit_cfg.layers, heads=dit_cfg.heads,
            kv_heads=dit_cfg.kv_heads, time_embed_dim=dit_cfg.time_embed_dim,
            z_dim=ae.latent_dim, vocab=dit_cfg.vocab, mlp_ratio=dit_cfg.mlp_ratio,
            sin_dim=dit_cfg.sin_dim,
        )
    state.init_dit(dit_cfg)
    train_t2i(cfg.dit_stages, state, out)
    last = cfg.dit_stages[-1]
    save_checkpoint(out / "ckpt", state, last, last.steps)
    print(f"velocity-model checkpoint at {out / 'ckpt'}")
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    out = Path(args.out or "samples")
    _write_run_txt(out, "sample", cfg)
    dataset = ShapesDataset(args.data) if args.data else None
    state, _ = load_checkpoint(args.ckpt, dataset)
    rng = Rng(cfg.seed).split("sample")
    if args.prompt:
        prompts = list(args.prompt)
    else:
        if dataset is None:
            raise ConfigError("fflow.cli: sample needs --prompt or --data for prompts")
        prompts = []
        for i in range(cfg.sample_count):
            idx = rng.split("pick", i).choice(len(dataset))
            _, _, text = sample_caption(
                dataset.caption_record(idx), cfg.dit_stages[0].policy(), rng.split("cap", i)
            )
            prompts.append(text)
    images = sample_images(
        state, prompts, cfg.sample, rng.split("euler"),
        resolution=(cfg.sample_height, cfg.sample_width),
        max_text_len=cfg.dit_stages[-1].max_text_len,
    )
    for i, (img, prompt) in enumerate(zip(images, prompts)):
        write_ppm(out / f"sample_{i:03d}.ppm", img)
        (out / f"sample_{i:03d}.txt").write_text(prompt + "\n")
    print(f"wrote {len(images)} samples under {out}")
    return 0


def cmd_analyze(args, cfg: RunConfig) -> int:
    out = Path(args.out or "report")
    _write_run_txt(out, "analyze", cfg)
    dataset = ShapesDataset(args.data)
    if args.ckpt:
        ae = load_autoencoder(args.ckpt)
        encoder = ae.encode
        encoder_id = f"autoencoder-{ae.mode}"
    else:
        featurizer = Featurizer(cfg.feat)
        encoder = featurizer
        encoder_id = f"featurizer-{cfg.feat.kind}"
    resolutions = list(cfg.analyze_resolutions)
    n = min(cfg.analyze_images, len(dataset))
    if n == 0:
        raise DataError("fflow.cli: analyze needs a nonempty dataset")
    mats = []
    for i in range(n):
        img = dataset.raw_image(i)
        rep = cross_res_cosine(encoder, img, resolutions, encoder_id)
        mats.append(rep.matrix)
        big = max(resolutions)
        grid = encoder(bilinear_resize(img, big, big))
        write_ppm(out / f"pca_{dataset.ids[i]}_{big}.ppm",
                  np.repeat(np.repeat(pca_rgb(grid), 16, axis=0), 16, axis=1))
    mean_matrix = np.mean(mats, axis=0)
    np.fill_diagonal(mean_matrix, 1.0)
    report = SimilarityReport(rep.resolutions, mean_matrix, encoder_id)
    report.write_csv(out / "cosine.csv")
    print(f"report under {out}")
    return 0


def cmd_grad_check(args, cfg: RunConfig) -> int:
    # Fixed probe seed: the max-relative-error metric divides by |numeric
    # gradient| + 1e-8, so elements whose true gradient happens to be nearly
    # zero amplify float32 roundoff; a pinned probe keeps the pass/fail
    # decision reproducible.
    results = op_checks(seed=0)
    results.update(dit_grad_check(seed=0))
    worst = max(results.values())
    lines = [f"{name} {err:.3e}" for name, err in sorted(results.items())]
    lines.append(f"max_relative_error {worst:.3e}")
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        _write_run_txt(out, "grad-check", cfg)
        (out / "gradcheck.txt").write_text(text + "\n")
    if worst > 1e-3:
        print("FAIL: max relative error above 1e-3", file=sys.stderr)
        return 1
    return 0


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train-ae": cmd_train_ae,
    "fit-stats": cmd_fit_stats,
    "train-dit": cmd_train_dit,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser, dest_map = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args, dest_map)
        return _HANDLERS[args.command](args, cfg)
    except FlowError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: fflow.cli: {e}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
