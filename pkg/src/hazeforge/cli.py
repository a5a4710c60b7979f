# cli.py - batch command line front end
# usage:
#   hazeforge dehaze img1.png img2.png --out out/ --method bccr
#   hazeforge dehaze hazy/ --out out/ --method fused --weights pfm.bin --dump-intermediates
#   hazeforge synth --clear clear/ --out synth/ --variants 2 --seed 7
#   hazeforge eval --pred out/ --ref synth/clear
#   hazeforge train --hazy hazy/ --out pfm.bin --steps 200 --trace loss.csv
#   hazeforge inspect img.png --out maps/
#
# data rows (TSV/CSV) go to stdout, diagnostics to stderr.
# exit codes: 0 ok, 1 unreadable input, 2 bad config / precheck, 3 solver stall,
# 4 some files of a batch failed

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np

from hazeforge.fusion import (
    PfmWeights, WeightsFormatError, dehaze_fused, init_weights, load_weights,
    param_specs, save_weights,
)
from hazeforge.hazesim import list_images, make_dataset
from hazeforge.imgcore import ImageError, PlanarImage, read_image, write_image
from hazeforge.io_config import ConfigError, apply_overrides, load_settings
from hazeforge.metrics import evaluate, format_db
from hazeforge.models import HazeRanges, RunConfig, Settings
from hazeforge.physloss import train_fusion, write_loss_trace
from hazeforge.precheck import PrecheckError, ensure_ok, precheck_inputs, precheck_pairs
from hazeforge.priors.api import dehaze
from hazeforge.priors.result import DegenerateAtmosphere, PriorResult, SolverStall

logger = logging.getLogger("hazeforge")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_CONFIG = 2
EXIT_STALL = 3
EXIT_PARTIAL = 4

THREADS_ENV = "HAZEFORGE_THREADS"


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, SolverStall):
        return EXIT_STALL
    if isinstance(exc, (ImageError, DegenerateAtmosphere, OSError)):
        return EXIT_INPUT
    if isinstance(exc, (ConfigError, PrecheckError, WeightsFormatError, ValueError)):
        return EXIT_CONFIG
    return EXIT_INPUT


def combine_codes(codes: Sequence[int]) -> int:
    failed = [c for c in codes if c != EXIT_OK]
    if not failed:
        return EXIT_OK
    if len(failed) == len(codes) and len(set(failed)) == 1:
        return failed[0]
    return EXIT_PARTIAL


def resolve_threads(value: Optional[int]) -> int:
    # --threads wins, then HAZEFORGE_THREADS, 0 means all logical cores
    if value is None:
        env = os.environ.get(THREADS_ENV, "").strip()
        value = int(env) if env else 0
    if value < 0:
        raise ConfigError("threads must be >= 0")
    return value or (os.cpu_count() or 1)


def _settings_for(args) -> Settings:
    settings = load_settings(args.config)
    seed = getattr(args, "seed", None)
    if seed is not None:
        settings = apply_overrides(settings, {"fusion.init_seed": seed, "train.seed": seed})
    return settings


def _run_config(args) -> RunConfig:
    run = RunConfig(
        method=getattr(args, "method", "dcp") or "dcp",
        threads=resolve_threads(getattr(args, "threads", None)),
        seed=getattr(args, "seed", None) or 0,
        weights_path=getattr(args, "weights", None),
        config_path=getattr(args, "config", None),
    )
    try:
        run.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return run


def _expand_inputs(items: Sequence[str]) -> List[Path]:
    paths: List[Path] = []
    for item in items:
        p = Path(item)
        paths.extend(list_images(p) if p.is_dir() else [p])
    return paths


def _parallel(fn: Callable, items: Sequence, threads: int) -> list:
    # results come back in input order regardless of scheduling
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(fn, items))


def _weights_for(run: RunConfig, settings: Settings) -> PfmWeights:
    if run.weights_path:
        # the file's own d wins over fusion.d
        return load_weights(run.weights_path)
    logger.warning("no --weights given, using default-initialized fusion weights (seed %d)",
                   settings.fusion.init_seed)
    return init_weights(settings.fusion.d, settings.fusion.init_seed)


def _run_method(img: PlanarImage, run: RunConfig, settings: Settings,
                weights: Optional[PfmWeights]) -> PriorResult:
    if run.method == "fused":
        result, _ = dehaze_fused(img, weights, settings)
        return result
    return dehaze(img, run.method, settings)


def _write_maps(result: PriorResult, out_dir: Path, stem: str) -> None:
    for name, m in result.maps.items():
        if m.channels in (1, 3):
            write_image(m.clamped(), out_dir / f"{stem}_{name}.png")


# --- subcommands ---

def cmd_dehaze(args) -> int:
    run = _run_config(args)
    settings = _settings_for(args)
    paths = _expand_inputs(args.inputs)
    ensure_ok(precheck_inputs(paths))
    weights = _weights_for(run, settings) if run.method == "fused" else None
    out_dir = Path(args.out)

    def work(path: Path):
        try:
            img = read_image(path)
            result = _run_method(img, run, settings, weights)
            target = out_dir / f"{path.stem}.png"
            write_image(result.radiance, target)
            if args.dump_intermediates:
                _write_maps(result, out_dir, path.stem)
            a = ",".join(f"{v:.4f}" for v in result.atmosphere.rgb)
            return EXIT_OK, f"{path.name}\t{a}\t{target}"
        except Exception as e:  # reported per file, the batch keeps going
            logger.error("%s: %s", path.name, e)
            return exit_code_for(e), None

    results = _parallel(work, paths, run.threads)
    for _, row in results:
        if row:
            print(row)
    return combine_codes([code for code, _ in results])


def cmd_synth(args) -> int:
    run = _run_config(args)
    ranges = HazeRanges(a_lo=args.a_range[0], a_hi=args.a_range[1],
                        t_lo=args.t_range[0], t_hi=args.t_range[1],
                        fields=tuple(args.fields), cell=args.cell)
    try:
        ranges.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    rows = make_dataset(args.clear, args.out, args.variants, ranges, run.seed, run.threads)
    print(Path(args.out) / "manifest.tsv")
    logger.info("%d hazy image(s) written", len(rows))
    return EXIT_OK


def _pair_names(pred_dir: Path, ref_dir: Path) -> List[str]:
    pred = [p.name for p in list_images(pred_dir)]
    ref = [p.name for p in list_images(ref_dir)]
    ensure_ok(precheck_pairs(pred, ref))
    return sorted(pred)


def cmd_eval(args) -> int:
    run = _run_config(args)
    pred_dir, ref_dir = Path(args.pred), Path(args.ref)
    try:
        names = _pair_names(pred_dir, ref_dir)
    except PrecheckError as e:
        logger.error("orphaned files: %s", e)
        return EXIT_CONFIG

    def work(name: str):
        try:
            return EXIT_OK, evaluate(read_image(pred_dir / name), read_image(ref_dir / name))
        except Exception as e:
            logger.error("%s: %s", name, e)
            return exit_code_for(e), None

    results = _parallel(work, names, run.threads)
    print("name\tpsnr\tssim\thaziness")
    reports = []
    for name, (_, rep) in zip(names, results):
        if rep is None:
            continue
        reports.append(rep)
        print(f"{name}\t{format_db(rep.psnr)}\t{rep.ssim:.6f}\t{rep.haziness:.6f}")
    if reports:
        finite = [r.psnr for r in reports if np.isfinite(r.psnr)]
        mean_psnr = float(np.mean(finite)) if finite else float("inf")
        print(f"mean\t{format_db(mean_psnr)}\t{np.mean([r.ssim for r in reports]):.6f}"
              f"\t{np.mean([r.haziness for r in reports]):.6f}")
    return combine_codes([code for code, _ in results])


def cmd_train(args) -> int:
    run = _run_config(args)
    overrides = {}
    for key, value in (("steps", args.steps), ("lr", args.lr), ("batch", args.batch),
                       ("crop", args.crop), ("priors", args.priors)):
        if value is not None:
            overrides[f"train.{key}"] = value
    settings = apply_overrides(_settings_for(args), overrides)
    weights = _weights_for(run, settings)
    outcome = train_fusion(args.hazy, weights, settings.train, settings.loss, settings,
                           threads=run.threads)
    save_weights(outcome.weights, args.out)
    if args.trace:
        write_loss_trace(outcome.losses, args.trace)
    print(f"{args.out}\t{outcome.losses[-1]:.6f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    run = _run_config(args)
    if args.image is None:
        if not run.weights_path:
            raise ConfigError("inspect needs an image or --weights")
        weights = load_weights(run.weights_path)
        print("param\tshape\tnorm")
        for name, shape in param_specs(weights.d):
            norm = float(np.linalg.norm(weights.params[name]))
            print(f"{name}\t{'x'.join(map(str, shape))}\t{norm:.6f}")
        return EXIT_OK

    settings = _settings_for(args)
    img = read_image(args.image)
    weights = _weights_for(run, settings) if run.method == "fused" else None
    result = _run_method(img, run, settings, weights)
    stem = Path(args.image).stem
    if args.out:
        _write_maps(result, Path(args.out), stem)
    print("map\tmin\tmean\tmax")
    for name, m in sorted(result.maps.items()):
        print(f"{name}\t{m.data.min():.6f}\t{m.data.mean():.6f}\t{m.data.max():.6f}")
    return EXIT_OK


# --- parser ---

def _common(p: argparse.ArgumentParser, method: bool = False, config: bool = True) -> None:
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker threads, 0 = all cores (default: ${THREADS_ENV} or 0)")
    p.add_argument("--seed", type=int, default=None, help="random seed")
    if config:
        p.add_argument("--config", default=None, help="key=value override file")
    if method:
        p.add_argument("--method", default="dcp", choices=["dcp", "bccr", "fused"])
        p.add_argument("--weights", default=None, help="PFMW weight file for --method fused")
    p.add_argument("--verbose", "-v", action="store_true", help="debug logging")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hazeforge", description="physics-prior image dehazing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dehaze", help="dehaze images")
    p.add_argument("inputs", nargs="+", help="image files or folders")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--dump-intermediates", action="store_true",
                   help="also write transmission maps and gates")
    _common(p, method=True)
    p.set_defaults(func=cmd_dehaze)

    p = sub.add_parser("synth", help="synthesize hazy images from clear ones")
    p.add_argument("--clear", required=True, help="folder of clear images")
    p.add_argument("--out", required=True, help="output folder")
    p.add_argument("--variants", type=int, default=1)
    p.add_argument("--a-range", type=float, nargs=2, default=(0.7, 1.0), metavar=("LO", "HI"))
    p.add_argument("--t-range", type=float, nargs=2, default=(0.3, 0.9), metavar=("LO", "HI"))
    p.add_argument("--fields", nargs="+", default=["smooth", "constant"],
                   choices=["smooth", "constant"])
    p.add_argument("--cell", type=int, default=16, help="noise cell size in pixels")
    _common(p, config=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="PSNR / SSIM / haziness of predictions")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    _common(p, config=False)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="fit the fusion network with the physical loss")
    p.add_argument("--hazy", required=True, help="folder of real hazy images")
    p.add_argument("--out", required=True, help="where to save the trained weights")
    p.add_argument("--weights", default=None, help="starting weights (default: fresh init)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--priors", default=None, choices=["both", "dcp", "bccr"])
    p.add_argument("--trace", default=None, help="write the loss trace as step,value CSV")
    _common(p)
    p.set_defaults(func=cmd_train, method="fused")

    p = sub.add_parser("inspect", help="dump intermediate maps, or summarize a weight file")
    p.add_argument("image", nargs="?", default=None)
    p.add_argument("--out", default=None, help="folder for the map PNGs")
    _common(p, method=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(levelname)s: %(message)s",
                        level=logging.DEBUG if args.verbose else logging.INFO, force=True)
    try:
        return args.func(args)
    except (ConfigError, PrecheckError) as e:
        logger.error("%s", e)
        return EXIT_CONFIG
    except Exception as e:
        logger.error("%s", e)
        return exit_code_for(e)


if __name__ == "__main__":
    sys.exit(main())
