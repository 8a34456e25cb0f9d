import argparse
import asyncio
import logging
import sys
from typing import Any, Dict, List, Optional, Sequence

import coloredlogs
import numpy as np

from depth_forge import config
from depth_forge.__version__ import __version__
from depth_forge.errors import EXIT_INTERNAL, EXIT_OK, ConfigError, ForgeError
from depth_forge.geometry import Intrinsics, Pixel
from depth_forge.markers import MarkerStyle
from depth_forge.pipeline import (
    load_config,
    run_baseline,
    run_eval,
    run_pointcloud,
    run_prepare,
    run_render,
    run_reward,
    write_resolved_config,
)
from depth_forge.schemas import PromptVariant, TaskKind
from depth_forge.synthetic import SCENE_KINDS, write_synthetic_manifest

logger = logging.getLogger("depth_forge")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def setup_logging(level: Optional[str] = None) -> None:
    coloredlogs.install(level=(level or config.LOG_LEVEL).upper(), fmt=LOG_FORMAT)


def _floats(text: str, count: int, what: str) -> List[float]:
    try:
        values = [float(part) for part in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{what} must be {count} comma-separated numbers, got {text!r}")
    if len(values) != count:
        raise argparse.ArgumentTypeError(f"{what} must be {count} comma-separated numbers, got {text!r}")
    return values


def pixel_arg(text: str) -> Pixel:
    u, v = _floats(text, 2, "pixel")
    try:
        return Pixel(u, v)
    except ForgeError as e:
        raise argparse.ArgumentTypeError(str(e))


def intrinsics_arg(text: str) -> Intrinsics:
    fx, fy, cx, cy = _floats(text, 4, "intrinsics")
    try:
        return Intrinsics(fx, fy, cx, cy)
    except ForgeError as e:
        raise argparse.ArgumentTypeError(str(e))


def range_arg(text: str) -> List[float]:
    return _floats(text, 2, "range")


def tasks_arg(text: str) -> List[str]:
    try:
        return [t.value for t in TaskKind.parse_list(text)]
    except ValueError:
        choices = ", ".join(t.value for t in TaskKind)
        raise argparse.ArgumentTypeError(f"unknown task in {text!r}; choose from {choices}")


def _common(parser: argparse.ArgumentParser, manifest: bool = True) -> None:
    parser.add_argument('--config', '-c', type=str, default=None,
                        help="Pipeline config file (YAML, or TOML on Python 3.11+).")
    if manifest:
        parser.add_argument('--manifest', '-m', type=str, default=None,
                            help="Manifest JSONL with one sample per line.")
    parser.add_argument('--out', '-o', type=str, required=True,
                        help="Output directory (file for reward and render).")
    parser.add_argument('--seed', type=int, default=None, help="Global seed.")
    parser.add_argument('--variant', type=str, default=None,
                        choices=[v.value for v in PromptVariant], help="Prompt variant.")
    parser.add_argument('--task', type=tasks_arg, default=None,
                        help="Comma-separated tasks, e.g. distance,speed.")
    parser.add_argument('--log-level', type=str, default=None,
                        help="Overrides the LOG_LEVEL environment variable.")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forge", description="Depth QA data preparation, evaluation and point clouds for VLMs."
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare", help="Render SFT question/answer records from a manifest.")
    _common(prepare)
    prepare.add_argument('--samples', type=int, default=None,
                         help="Draw this many entries from the dataset mixture instead of one pass.")
    prepare.add_argument('--split', type=str, default=None, choices=["train", "eval"])
    prepare.set_defaults(handler=cmd_prepare)

    evaluate = sub.add_parser("eval", help="Evaluate an endpoint (or the mock oracle) on a manifest.")
    _common(evaluate)
    evaluate.add_argument('--samples', type=int, default=None, help="Samples per dataset.")
    evaluate.set_defaults(handler=cmd_eval)

    baseline = sub.add_parser("baseline", help="Evaluate a constant-distance predictor.")
    _common(baseline)
    baseline.add_argument('--samples', type=int, default=None, help="Samples per dataset.")
    baseline.add_argument('--constant', type=float, default=None, help="Answer in meters (default 2.0).")
    baseline.set_defaults(handler=cmd_baseline)

    reward = sub.add_parser("reward", help="GRPO rewards and group advantages for rollouts.")
    _common(reward, manifest=False)
    reward.add_argument('--rollouts', type=str, required=True, help="Rollouts JSONL.")
    reward.add_argument('--group-size', type=int, default=None)
    reward.set_defaults(handler=cmd_reward)

    pointcloud = sub.add_parser("pointcloud", help="Query a pixel grid and write a PLY point cloud.")
    _common(pointcloud)
    pointcloud.add_argument('--entry', type=str, default=None, help="Manifest entry id.")
    pointcloud.add_argument('--image', type=str, default=None, help="Image path (endpoint runs only).")
    pointcloud.add_argument('--intrinsics', type=intrinsics_arg, default=None, help="fx,fy,cx,cy")
    pointcloud.add_argument('--n', type=int, default=None, help="Grid pixels (default 10000).")
    pointcloud.add_argument('--depth-colors', action='store_true', help="Color points by distance.")
    pointcloud.set_defaults(handler=cmd_pointcloud)

    render = sub.add_parser("render", help="Draw markers on an image for inspection.")
    _common(render, manifest=False)
    render.add_argument('--image', type=str, required=True)
    render.add_argument('--pixel', type=pixel_arg, action='append', required=True,
                        help="u,v in pixels; repeat for several markers.")
    render.add_argument('--label', type=str, action='append', default=None,
                        help="Marker label; repeat once per --pixel.")
    render.add_argument('--style', type=str, default=None, choices=[s.value for s in MarkerStyle])
    render.set_defaults(handler=cmd_render)

    synth = sub.add_parser("synth", help="Write a synthetic manifest for offline runs.")
    _common(synth, manifest=False)
    synth.add_argument('--n', type=int, default=256)
    synth.add_argument('--scene', type=str, default="room", choices=list(SCENE_KINDS))
    synth.add_argument('--datasets', type=str, default="synthetic", help="Comma-separated dataset names.")
    synth.add_argument('--depth-range', type=range_arg, default=[0.5, 80.0], help="lo,hi in meters.")
    synth.add_argument('--uniform', action='store_true', help="Uniform instead of log-uniform distances.")
    synth.add_argument('--poses', action='store_true', help="Give frames camera poses and shared scenes.")
    synth.add_argument('--encoding', type=str, default="png16", choices=["png16", "pfm", "npy"])
    synth.add_argument('--split', type=str, default="eval", choices=["train", "eval"])
    synth.set_defaults(handler=cmd_synth)
    return parser


def _overrides(args: argparse.Namespace, **extra: Any) -> Dict[str, Any]:
    overrides = {
        "seed": args.seed,
        "prompt.variant": args.variant,
        "tasks.tasks": args.task,
    }
    overrides.update(extra)
    return overrides


def _config(args: argparse.Namespace, **extra: Any):
    return load_config(args.config, _overrides(args, **extra))


def _require_manifest(args: argparse.Namespace) -> str:
    if not args.manifest:
        raise ConfigError(f"'{args.command}' needs --manifest")
    return args.manifest


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = _config(args, **{"prepare.samples": args.samples, "prepare.split": args.split})
    counts = run_prepare(cfg, _require_manifest(args), args.out)
    for task, n in counts.items():
        print(f"{task}: {n}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _config(args, **{"eval.samples_per_dataset": args.samples})
    report = asyncio.run(run_eval(cfg, _require_manifest(args), args.out))
    print(f"average delta1: {report.delta1:.3f}  failure rate: {report.failure_rate:.3f}")
    return EXIT_OK


def cmd_baseline(args: argparse.Namespace) -> int:
    cfg = _config(args, **{"eval.samples_per_dataset": args.samples, "eval.constant": args.constant})
    report = asyncio.run(run_baseline(cfg, _require_manifest(args), args.out))
    print(f"average delta1: {report.delta1:.3f}")
    return EXIT_OK


def cmd_reward(args: argparse.Namespace) -> int:
    cfg = _config(args, **{"metrics.grpo.group_size": args.group_size})
    results = run_reward(cfg, args.rollouts, args.out)
    print(f"rollouts: {len(results)}  flagged: {sum(1 for r in results if r['flagged'])}")
    return EXIT_OK


def cmd_pointcloud(args: argparse.Namespace) -> int:
    cfg = _config(args, **{
        "pointcloud.grid": args.n,
        "pointcloud.depth_colors": True if args.depth_colors else None,
    })
    cloud = asyncio.run(run_pointcloud(cfg, args.out, manifest=args.manifest, entry_id=args.entry,
                                       image_path=args.image, intrinsics=args.intrinsics))
    print(f"points: {len(cloud)}  failures: {cloud.failures}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = _config(args, **{"marker.style": args.style})
    run_render(cfg, args.image, args.pixel, args.out, labels=args.label)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _config(args)
    datasets = [name.strip() for name in args.datasets.split(",") if name.strip()]
    if not datasets:
        raise ConfigError("--datasets needs at least one name")
    path = write_synthetic_manifest(
        args.out,
        args.n,
        datasets=datasets,
        depth_range=tuple(args.depth_range),
        rng=np.random.default_rng(cfg.seed),
        with_poses=args.poses,
        scene=args.scene,
        encoding=args.encoding,
        split=args.split,
        log_uniform=not args.uniform,
    )
    write_resolved_config(cfg, args.out)
    print(path)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except ForgeError as e:
        logger.error(f"{args.command} failed: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.error(f"{args.command} interrupted")
        return EXIT_INTERNAL
    except Exception:
        logger.exception(f"{args.command} failed with an unexpected error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
