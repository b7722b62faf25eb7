"""Command-line interface for running spectral decomposition experiments."""

from __future__ import annotations

import argparse
import importlib.resources
import sys
from pathlib import Path

from .experiment import (
    PIPELINES,
    ConfigError,
    ExperimentConfig,
    load_config,
    recompute_metrics,
    run_experiment,
    validate_config,
)

_STAGES_BY_COMMAND = {
    "simulate": ("simulate",),
    "reconstruct": ("simulate", "reconstruct"),
    "decompose": ("simulate", "reconstruct", "decompose"),
    "run": ("simulate", "reconstruct", "decompose", "metrics"),
}


def _bundled_config_text(name: str) -> tuple[str, Path]:
    root = importlib.resources.files("smdk").joinpath("data")
    path = Path(str(root.joinpath(name)))
    return path.read_text(), path.parent


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="experiment config YAML")
    parser.add_argument("--desk-scale", action="store_true",
                        help="use the bundled reduced-size preset instead of --config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the noise RNG seed from the config")
    parser.add_argument("--out", type=Path, default=None,
                        help="run directory (overrides config output_dir)")
    parser.add_argument("--pipelines", type=str, default=None,
                        help="comma-separated subset of " + ",".join(PIPELINES))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smdk",
        description="Spectral CT simulation, reconstruction and material decomposition.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("run", "full pipeline: simulate, reconstruct, decompose, metrics"),
        ("simulate", "phantom, channel images and (noisy) sinograms only"),
        ("reconstruct", "simulate plus channel reconstruction"),
        ("decompose", "everything up to material maps"),
        ("metrics", "recompute metric tables from an existing run directory"),
        ("validate", "check a config file and report all violations"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    return parser


def _load(args) -> ExperimentConfig:
    if args.desk_scale and args.config:
        raise ConfigError(["give either --config or --desk-scale, not both"])
    if args.desk_scale:
        text, base = _bundled_config_text("config_desk.yaml")
        config = validate_config(text, base_dir=base)
    elif args.config:
        config = load_config(args.config)
    else:
        raise ConfigError(["one of --config or --desk-scale is required"])
    if args.pipelines:
        wanted = tuple(p.strip() for p in args.pipelines.split(",") if p.strip())
        bad = [p for p in wanted if p not in PIPELINES]
        if bad or not wanted:
            raise ConfigError([f"--pipelines: unknown entries {bad}; valid: {list(PIPELINES)}"])
        config.pipelines = wanted
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load(args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for err in exc.errors:
            print(f"  - {err}", file=sys.stderr)
        return 2

    if args.command == "validate":
        print("config OK")
        return 0

    try:
        if args.command == "metrics":
            out = args.out or config.output_dir
            if out is None:
                print("metrics: --out (or config output_dir) is required", file=sys.stderr)
                return 2
            recompute_metrics(config, Path(out))
            print(f"metrics written to {out}")
            return 0
        manifest = run_experiment(config, seed=args.seed, output_dir=args.out,
                                  stages=_STAGES_BY_COMMAND[args.command])
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for result in manifest.pipelines:
        line = f"{result.name}: {result.status} ({result.seconds:.1f}s)"
        if result.error:
            line += f" {result.error}"
        print(line)
    print(f"artifacts in {manifest.output_dir}")
    return 0 if manifest.all_ok else 1


if __name__ == "__main__":
    sys.exit(main())
