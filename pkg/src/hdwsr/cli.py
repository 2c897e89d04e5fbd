"""Command line entry point: ``hdwsr {train,sample,eval,dwt-debug,flops}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import engine
from .config import RunConfig, leaf_keys, parse_value
from .errors import ConfigError, DimensionError, IngestionError, ReportingError
from .imageio import read_png, write_png
from .metrics import format_kv, write_json


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    group = p.add_argument_group("config overrides", "every config key, e.g. --model.levels 2")
    for key in leaf_keys():
        if key != "seed":
            group.add_argument(f"--{key}", dest=key, metavar="VALUE", type=parse_value, default=None)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {k: getattr(args, k) for k in leaf_keys() if k != "seed" and getattr(args, k, None) is not None}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = cfg.with_overrides(overrides).check_paths()
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    cfg.dump(Path(cfg.out_dir) / "config.yaml")
    path = engine.train(cfg, resume=args.resume)
    print(f"checkpoint={path}")
    return 0


def cmd_sample(args) -> int:
    cfg, net, _ = engine.load_checkpoint(args.checkpoint)
    lr = read_png(args.input)
    sr = engine.sample(net, lr, engine.presr_source(cfg), seed=args.seed)
    write_png(args.output, sr, bits=args.bits)
    print(f"output={args.output}")
    return 0


def cmd_eval(args) -> int:
    result = engine.evaluate(args.checkpoint, args.dir, seed=args.seed, attention=args.attention,
                             topk=args.topk, with_flops=args.flops, max_size=args.max_size)
    lines = {}
    for row in result["images"]:
        lines[f"{row['image']}.psnr"] = row["psnr"]
        lines[f"{row['image']}.ssim"] = row["ssim"]
    lines["mean_psnr"] = result["mean_psnr"]
    lines["mean_ssim"] = result["mean_ssim"]
    for k, v in result.get("flops", {}).items():
        lines[f"flops.{k}"] = v
    print(format_kv(lines))
    if args.json:
        write_json(args.json, result)
    return 0


def cmd_dwt_debug(args) -> int:
    img = read_png(args.input)
    out = Path(args.out_dir)
    for j, tile in enumerate(engine.subband_mosaics(img, args.levels), start=1):
        path = out / f"{Path(args.input).stem}_level{j}.png"
        write_png(path, tile)
        print(f"level{j}={path}")
    return 0


def cmd_flops(args) -> int:
    if args.checkpoint:
        cfg, net, _ = engine.load_checkpoint(args.checkpoint)
    else:
        cfg = _run_config(args)
        net = engine.build_model(cfg)
    size = args.size or cfg.data.patch
    reports = engine.compare_attention_flops(net, size, seed=cfg.seed, topk=args.topk)
    lines = {f"{mode}.total": rep["total"] for mode, rep in reports.items()}
    lines["dtb_over_topk"] = reports["dtb"]["total"] / reports["topk"]["total"]
    print(format_kv(lines))
    if args.json:
        write_json(args.json, reports)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdwsr", description="Wavelet-guided residual diffusion super-resolution")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_config_flags(p)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="super-resolve one PNG")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="LR PNG")
    p.add_argument("--output", required=True, help="SR PNG to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bits", type=int, default=8, choices=(8, 16))
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="PSNR/SSIM over a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dir", required=True, help="HR PNGs, or lr/ and hr/ subfolders")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--attention", choices=("dtb", "topk", "dense", "self-only"))
    p.add_argument("--topk", type=int)
    p.add_argument("--max-size", type=int, help="centre-crop images to at most this side")
    p.add_argument("--flops", action="store_true", help="include the FLOP ledger")
    p.add_argument("--json", help="also write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dwt-debug", help="write per-level subband mosaics")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--out-dir", default="dwt_debug")
    p.set_defaults(func=cmd_dwt_debug)

    p = sub.add_parser("flops", help="compare dtb, topk and dense FLOP counts")
    _add_config_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--size", type=int, help="input side (default data.patch)")
    p.add_argument("--topk", type=int)
    p.add_argument("--json")
    p.set_defaults(func=cmd_flops)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    engine.configure_determinism()
    try:
        return args.func(args)
    except (ConfigError, DimensionError, IngestionError, ReportingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
