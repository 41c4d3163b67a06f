"""Command-line entry point.

Exit codes: 0 success, 2 configuration or usage error, 3 data or file
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, ExperimentConfig, apply_override, config_from_dict, load_config
from .denoiser.checkpoint import CheckpointError
from .denoiser.net import NumericError
from .diffusion import slice_rng
from .experiments import (LEARNED, METHODS_2D, Models, eval_2d, eval_3d, generate_data, save_report,
                          slice_restorer, superresolve, train)
from .metrics import MetricError
from .volume import Axis, Volume, VolumeError, make_uniform_mask, read_volume, write_volume

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("msdsr")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.steps=100 (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out", help="output directory (config out_dir)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdsr", description="Masked slice diffusion for z-axis super-resolution")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render phantom volumes and a dataset manifest")
    _common(p)

    p = sub.add_parser("train", help="train a denoiser or a learned baseline")
    _common(p)
    p.add_argument("--model", choices=LEARNED)
    g = p.add_mutually_exclusive_group()
    g.add_argument("--force", action="store_true", help="discard an existing run directory")
    g.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")

    p = sub.add_parser("superresolve", help="upsample an anisotropic volume along z")
    _common(p)
    p.add_argument("input", help="VOXSR1 volume of depth n / factor")
    p.add_argument("output", help="VOXSR1 output path")
    p.add_argument("--factor", type=int, choices=(1, 2, 4, 8), help="z factor; checked against the input shape")
    p.add_argument("--method", default="msdsr", choices=("nn", "linear", "ms-regression", "e2e", "msdsr"))
    p.add_argument("--direction", choices=("xz", "yz", "both"))
    p.add_argument("--blur", action="store_true", default=None)
    p.add_argument("--interlace", choices=("every-step", "init-only"))
    p.add_argument("--save-directional", action="store_true",
                   help="also write the XZ and YZ volumes next to the output")
    p.add_argument("--force", action="store_true", help="overwrite an existing output")

    p = sub.add_parser("restore2d", help="fill the missing rows of one 2D slice")
    _common(p)
    p.add_argument("input", help="VOXSR1 file holding a (C, l, N, 1) observation")
    p.add_argument("output", help="VOXSR1 output path, (C, n, N, 1)")
    p.add_argument("--factor", type=int, required=True, choices=(1, 2, 4, 8))
    p.add_argument("--method", default="msdsr", choices=METHODS_2D)
    p.add_argument("--interlace", choices=("every-step", "init-only"))
    p.add_argument("--force", action="store_true", help="overwrite an existing output")

    for name, what in (("eval-2d", "paired 2D restoration metrics"), ("eval-3d", "SliceFID of each method")):
        p = sub.add_parser(name, help=what)
        _common(p)
        p.add_argument("--factor", type=int, action="append", choices=(2, 4, 8),
                       help="factor(s) to evaluate (repeatable)")
        p.add_argument("--interlace", choices=("every-step", "init-only"))
        if name == "eval-3d":
            p.add_argument("--direction", choices=("xz", "yz", "both"))
            p.add_argument("--blur", action="store_true", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    d = load_config(args.config)
    for item in args.set:
        apply_override(d, item)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.threads is not None:
        d["threads"] = args.threads
    if args.out is not None:
        d["out_dir"] = args.out
    if getattr(args, "interlace", None):
        d.setdefault("diffusion", {})["interlace"] = args.interlace
    if getattr(args, "direction", None):
        d.setdefault("eval", {})["direction"] = args.direction
    if getattr(args, "blur", None):
        d.setdefault("eval", {})["blur"] = True
    if getattr(args, "factor", None) and args.command.startswith("eval"):
        d.setdefault("eval", {})["factors"] = list(args.factor)
    if getattr(args, "model", None):
        d.setdefault("train", {})["model"] = args.model
    return config_from_dict(d)


def _write_output(path: str, v: Volume, cfg: ExperimentConfig, force: bool, extra: dict) -> None:
    out = Path(path)
    if out.exists() and not force:
        raise ConfigError(f"{out} exists; pass --force to overwrite")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_volume(out, v)
    sidecar = {"config_digest": cfg.digest(), "shape": list(v.shape), **extra}
    Path(str(out) + ".json").write_text(json.dumps(sidecar, indent=2))


def cmd_gen_data(cfg, args) -> None:
    path = generate_data(cfg)
    print(f"wrote {path}")


def cmd_train(cfg, args) -> None:
    res = train(cfg, cfg.train.model, force=args.force, resume=args.resume)
    if res.log.rows:
        print(f"checkpoint {res.checkpoint} (final loss {res.log.losses[-1]:.5f})")
    else:
        print(f"checkpoint {res.checkpoint} already complete")


def cmd_superresolve(cfg, args) -> None:
    low = read_volume(args.input)
    _, h, w, depth = low.shape
    if h != w or h % depth:
        raise VolumeError(f"input {low.shape} needs H == W and depth dividing H")
    if args.factor is not None and args.factor != h // depth:
        raise VolumeError(f"--factor {args.factor} does not match input depth {depth} for n={h}")
    parts: dict = {}
    high = superresolve(cfg, low, args.method, Models(cfg), cfg.seed, cfg.threads,
                        cfg.eval.direction, cfg.eval.blur, parts)
    info = {"method": args.method, "factor": h // depth, "seed": cfg.seed,
            "direction": cfg.eval.direction, "blur": cfg.eval.blur}
    _write_output(args.output, high, cfg, args.force, info)
    print(f"wrote {args.output} {high.shape}")
    if args.save_directional:
        if not parts:
            raise ConfigError("--save-directional needs a slice-based method with --direction both")
        stem = Path(args.output)
        for name, vol in parts.items():
            path = stem.with_name(f"{stem.stem}.{name}{stem.suffix}")
            _write_output(str(path), vol, cfg, args.force, {**info, "direction": name, "blur": False})
            print(f"wrote {path}")


def cmd_restore2d(cfg, args) -> None:
    obs = read_volume(args.input)
    c, rows, cols, depth = obs.shape
    if depth != 1:
        raise VolumeError(f"restore2d expects a (C, l, N, 1) file, got {obs.shape}")
    mask = make_uniform_mask(rows * args.factor, rows)
    restorer = slice_restorer(cfg, args.method, Models(cfg))
    out = restorer(obs.data[None, :, :, :, 0].astype(np.float64), mask, [slice_rng(cfg.seed, Axis.XY, 0)])
    high = Volume(np.asarray(out[0], dtype=np.float32)[..., None])
    _write_output(args.output, high, cfg, args.force,
                  {"method": args.method, "factor": args.factor, "seed": cfg.seed})
    print(f"wrote {args.output} {high.shape}")


def _print_records(records) -> None:
    for r in records:
        print(f"{r.method:>16s} {r.metric:>9s} {r.axis:>4s} x{r.scale}  {r.value:.4f}")


def cmd_eval_2d(cfg, args) -> None:
    records = eval_2d(cfg)
    paths = save_report(records, cfg.out_dir, "eval2d")
    _print_records(records)
    print(f"wrote {paths[0]} and {paths[1]}")


def cmd_eval_3d(cfg, args) -> None:
    records = eval_3d(cfg)
    paths = save_report(records, cfg.out_dir, "eval3d")
    _print_records(records)
    print(f"wrote {paths[0]} and {paths[1]}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "superresolve": cmd_superresolve,
    "restore2d": cmd_restore2d,
    "eval-2d": cmd_eval_2d,
    "eval-3d": cmd_eval_3d,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (VolumeError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, MetricError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
