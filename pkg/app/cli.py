"""Command line entry point: ``pose-streamer <command> [options]``."""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional

from app.core.config import configure_logging, get_settings
from app.core.errors import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, ConfigError, PoseStreamerError
from app.schemas.config import Modality, RunConfig, load_run_config
from app.schemas.scene import SceneConfig, SceneKind
from app.services.dataset import write_dataset
from app.services.pipeline import ABLATION_AXES, ablate, bench, evaluate_files, track_and_evaluate

logger = logging.getLogger(__name__)


def _parse_sets(items: list[str]) -> dict[str, Any]:
    overrides: dict[str, Any] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def run_config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = _parse_sets(args.set or [])
    overrides.update(
        {
            "dataset": args.dataset,
            "out": args.out,
            "seed": args.seed,
            "modality": args.modality,
            "dump_debug": True if args.dump_debug else None,
        }
    )
    config_path = args.config or get_settings().default_run_config
    return load_run_config(Path(config_path) if config_path else None, overrides)


def cmd_generate(args: argparse.Namespace) -> int:
    data: dict[str, Any] = {}
    if args.scene_config:
        try:
            data = json.loads(Path(args.scene_config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as e:
            raise ConfigError(f"Cannot load scene config {args.scene_config}: {e}") from e
    for key in ("scene", "duration", "frame_rate", "seed"):
        value = getattr(args, key)
        if value is not None:
            data[key] = value
    try:
        cfg = SceneConfig.model_validate(data)
    except ValueError as e:
        raise ConfigError(f"Invalid scene configuration: {e}") from e
    frames = write_dataset(cfg, Path(args.out))
    print(f"generated {frames} frames in {args.out}")
    return EXIT_OK


def cmd_track(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    result, report = track_and_evaluate(config, args.workers)
    print(
        f"frames={report.frames} lost={sum(result.lost)} fps={result.fps:.1f} "
        f"add@0.1d={report.overall.add_recall_01d:.3f} adds@0.1d={report.overall.adds_recall_01d:.3f}"
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_files(
        Path(args.dataset),
        Path(args.trace),
        Path(args.out),
        Path(args.timing) if args.timing else None,
    )
    print(
        f"frames={report.frames} add@0.1d={report.overall.add_recall_01d:.3f} "
        f"adds@0.1d={report.overall.adds_recall_01d:.3f} switch={report.overall.switch_count}"
    )
    return EXIT_OK


def cmd_ablate(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    rows = ablate(config, args.axis, args.workers)
    for row in rows:
        o = row.report.overall
        print(
            f"{row.axis}={row.setting}: add={o.add_mean:.4f} adds@0.1d={o.adds_recall_01d:.3f} "
            f"e_r={o.e_r.mean:.2f} switch={o.switch_count}"
        )
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = run_config_from_args(args)
    target = args.target if args.target is not None else get_settings().fps_target
    result, passed = bench(config, target, args.workers)
    print(f"fps={result.fps:.1f} target={target:.1f} {'pass' if passed else 'fail'}")
    return EXIT_OK if passed else EXIT_INVARIANT


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.main:app", host=args.host, port=args.port)
    return EXIT_OK


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="Flat 'section.key = value' run config file")
    parser.add_argument("--dataset", help="Dataset directory")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--modality", choices=[m.value for m in Modality])
    parser.add_argument("--dump-debug", action="store_true", help="Write cluster, hypothesis and queue dumps")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key")
    parser.add_argument("--workers", type=int, default=get_settings().workers)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pose-streamer", description=__doc__)
    parser.add_argument("--log-level", help="Overrides POSE_STREAMER_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="Write a synthetic stereo dataset")
    p.add_argument("--scene", choices=[s.value for s in SceneKind])
    p.add_argument("--duration", type=float)
    p.add_argument("--frame-rate", dest="frame_rate", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--scene-config", help="JSON file with a full scene configuration")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("track", help="Track a dataset and write trace, timing and report")
    _add_run_flags(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="Evaluate a trace against a dataset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--timing", help="timing.csv of the run, enables FPS and lost counts")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="Run one ablation axis")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="Track end to end and compare FPS with the target")
    p.add_argument("--target", type=float)
    _add_run_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="Start the HTTP API")
    p.add_argument("--host", default="0.0.0.0")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.func(args)
    except PoseStreamerError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except ValueError as e:
        logger.error("Invalid argument: %s", e)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
