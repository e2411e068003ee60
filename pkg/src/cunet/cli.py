"""Command-line entry point: train, sample, eval, profile, info.

Exit codes: 0 success, 1 usage or configuration error, 2 data or file-format
error, 3 numeric failure. Errors go to stderr prefixed with ``error:``.
"""

from __future__ import annotations

import argparse
import sys
import warnings
from pathlib import Path

from .efficiency import DEFAULT_BUDGET, count_params, format_table, memory_mb, profile_model, time_inference
from .errors import ConfigError, ContractError, FormatError, NumericFault, ShapeError, SolverFailure
from .harness.checkpoint import load_checkpoint, save_checkpoint
from .harness.config import RunConfig
from .harness.data import Dataset, load_idx_dataset
from .harness.features import FeatureExtractor, fid_proxy
from .harness.frechet import FidWarning
from .harness.images import save_png
from .harness.manifest import Manifest, git_blob_sha1
from .harness.train import fid_sweep, load_data, make_model, stderr_log, sweep_grid, train
from .diffusion import sample
from .models import ABLATIONS, CUNetConfig, init_params

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CKPT_NAME = "checkpoint.cun"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _ckpt_bytes(path) -> bytes:
    return Path(path).read_bytes()


# ----------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = RunConfig.from_file(args.config).override(args.set or [])
    out = Path(args.out or cfg["train"]["out"])
    params = None
    if args.resume:
        params, _ = load_checkpoint(args.resume, expect=cfg)
    data = load_data(cfg)
    log = None if args.quiet else stderr_log
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = train(cfg, data, params=params, log=log)
    out.mkdir(parents=True, exist_ok=True)
    blob = save_checkpoint(result.params, cfg, out / CKPT_NAME)
    (out / "losses.txt").write_text("".join(f"{v!r}\n" for v in result.losses), encoding="utf-8")
    man = Manifest("train").add_config(cfg)
    man.add("data.source", data.source).add("data.count", len(data))
    man.add("checkpoint", CKPT_NAME).add("checkpoint_sha1", git_blob_sha1(blob))
    if args.resume:
        man.add("resumed_from_sha1", git_blob_sha1(_ckpt_bytes(args.resume)))
    man.add("param_count", count_params(result.params))
    man.add("loss_ma_step10", f"{result.ma_start:.6f}").add("loss_ma_final", f"{result.ma_end:.6f}")
    man.add("loss_drop", f"{result.drop:.6f}").add("train_seconds", f"{result.seconds:.2f}")
    for i, w in enumerate(caught):
        man.add(f"warning_{i}", str(w.message))
    man.write(out / "manifest.txt")
    print(f"loss_ma_step10: {result.ma_start:.6f}")
    print(f"loss_ma_final: {result.ma_end:.6f}")
    print(f"loss_drop: {result.drop:.6f}")
    print(f"checkpoint: {out / CKPT_NAME}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    diff = cfg.diffusion_config(sample_steps=args.steps)
    model_cfg = cfg.model_config()
    shape = (model_cfg.in_channels, args.size, args.size) if args.size else (
        model_cfg.in_channels, cfg["data"]["size"], cfg["data"]["size"])
    imgs = sample(make_model(params, model_cfg), diff, args.n, shape, args.seed, workers=args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    man = Manifest("sample").add_config(cfg)
    man.add("checkpoint_sha1", git_blob_sha1(_ckpt_bytes(args.ckpt)))
    man.add("n", args.n).add("steps", diff.sample_steps).add("seed", args.seed)
    for i, img in enumerate(imgs):
        name = f"sample_{i:04d}.png"
        save_png(out / name, img)
        man.add(f"image_{i}_sha1", git_blob_sha1((out / name).read_bytes()))
    man.write(out / "manifest.txt")
    print(f"wrote {args.n} images to {out}")
    return EXIT_OK


def _eval_reference(arg: str, cfg: RunConfig) -> Dataset:
    if arg == "synthetic":
        return load_data(cfg.override(["data.source=synthetic"]))
    return load_idx_dataset(arg)


def cmd_eval(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    ref = _eval_reference(args.data, cfg).require_nonempty("reference set")
    n = args.n if args.n is not None else cfg["eval"]["n"]
    seed = args.seed if args.seed is not None else cfg["eval"]["seed"]
    ext = FeatureExtractor(seed=cfg["eval"]["extractor_seed"], d=cfg["eval"]["features"]).fit(ref.images)
    model = make_model(params, cfg.model_config())
    diff = cfg.diffusion_config()
    grid = sweep_grid(cfg)
    log = None if args.quiet else stderr_log
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", FidWarning)
        sweep = fid_sweep(model, diff, ref.images, grid, n, seed, ext, args.workers, log)
        steps = args.steps or sweep.best_steps
        if steps in sweep.grid:
            value = sweep.fid[sweep.grid.index(steps)]
        else:
            imgs = sample(model, cfg.diffusion_config(sample_steps=steps), n, ref.shape, seed, workers=args.workers)
            value = fid_proxy(imgs, ref.images, ext, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.txt").write_text(sweep.to_text(), encoding="utf-8")
    man = Manifest("eval").add_config(cfg)
    man.add("checkpoint_sha1", git_blob_sha1(_ckpt_bytes(args.ckpt)))
    man.add("reference", ref.source).add("reference_count", len(ref)).add("n", n).add("seed", seed)
    man.add_block("sweep", sweep.to_text())
    man.add("best_steps", sweep.best_steps).add("fid_steps", steps).add("fid_proxy", f"{value:.6f}")
    seen = []
    for w in caught:
        if str(w.message) not in seen:
            seen.append(str(w.message))
    for i, msg in enumerate(seen):
        man.add(f"warning_{i}", msg)
    man.write(out / "manifest.txt")
    print(sweep.to_text(), end="")
    print(f"best_steps: {sweep.best_steps}")
    print(f"fid_steps: {steps}")
    print(f"fid_proxy: {value:.6f}")
    return EXIT_OK


def cmd_profile(args) -> int:
    cfg = RunConfig.from_file(args.config).override(args.set or [])
    res = tuple(args.resolution)
    model_cfg = cfg.model_config()
    cunet = model_cfg if isinstance(model_cfg, CUNetConfig) else cfg.override(["model.kind=cunet"]).model_config()
    budget = None if cunet.solver.adaptive else cunet.solver
    rows = []
    for a in ABLATIONS:
        variant = cunet.ablation(a)
        label = "cU-Net" if a == "full" else f"cU-Net {a}"
        rows.append((variant, label))
    rows.append((cfg.matched_unet(), "U-Net"))
    reports = []
    for mcfg, label in rows:
        wall = None
        if args.time_repeats:
            params = init_params(mcfg, seed=0)
            wall = time_inference(
                make_model(params, mcfg), cfg.diffusion_config(), repeats=args.time_repeats,
                shape=(mcfg.in_channels, *res),
            )
        reports.append(profile_model(mcfg, res, label, budget or DEFAULT_BUDGET, wall))
    print(format_table(reports), end="")
    for rep in reports:
        print()
        print(rep.to_text(), end="")
    return EXIT_OK


def cmd_info(args) -> int:
    params, cfg = load_checkpoint(args.ckpt)
    print(cfg.to_text(), end="")
    n = count_params(params)
    print(f"param_count: {n}")
    print(f"memory_mb: {memory_mb(n):.4f}")
    print(f"checkpoint_sha1: {git_blob_sha1(_ckpt_bytes(args.ckpt))}")
    return EXIT_OK


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cunet", description="Continuous U-Net diffusion toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a denoiser from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to start from")
    t.add_argument("--out", help="output directory (default: [train] out)")
    t.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="write PNG samples from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--steps", type=int, help="reverse steps (default: config)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--size", type=int, default=0, help="image side (default: [data] size)")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="Frechet proxy and FID-vs-steps sweep")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="IDX images file, or 'synthetic' for the checkpoint's [data]")
    e.add_argument("--n", type=int, help="generated images per grid point (default: [eval] n)")
    e.add_argument("--steps", type=int, help="step count for the reported value (default: sweep argmin)")
    e.add_argument("--seed", type=int)
    e.add_argument("--out", default="eval_out")
    e.add_argument("--workers", type=int, default=1)
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("profile", help="efficiency report for a config and its ablations")
    f.add_argument("--config", required=True)
    f.add_argument("--resolution", type=int, nargs=2, metavar=("H", "W"), required=True)
    f.add_argument("--time-repeats", type=int, default=0, help="also time sampling with this many repeats")
    f.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    f.set_defaults(func=cmd_profile)

    i = sub.add_parser("info", help="print a checkpoint's config and size")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_info)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ContractError, ShapeError) as e:
        code, msg = EXIT_USAGE, str(e)
    except (FormatError, OSError) as e:
        code, msg = EXIT_DATA, str(e)
    except (NumericFault, SolverFailure, FloatingPointError) as e:
        code, msg = EXIT_NUMERIC, str(e)
    print(f"error: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
