"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
Errors are printed to stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import scenario as sc
from .config import bundled_fixtures, load_config
from .errors import ConfigError, ScenarioError
from .field import CoherenceMatrix
from .sensor import IntensityRecord

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _load_record(path, ctx: sc.Context) -> IntensityRecord:
    try:
        rec = IntensityRecord.from_csv(path)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read intensity data {path}: {exc}") from exc
    if rec.values.shape != (ctx.geom.n_lenses, ctx.geom.n_pixels):
        raise ConfigError(f"intensity data has shape {rec.values.shape}, sensor expects "
                          f"{(ctx.geom.n_lenses, ctx.geom.n_pixels)}")
    return rec


def _data_or_simulate(args, ctx: sc.Context) -> None:
    if getattr(args, "data", None):
        ctx.record = _load_record(args.data, ctx)
        ctx.report["measurement"] = {"source": Path(args.data).name, "n_samples": ctx.record.values.size}
    else:
        sc.run_simulate(ctx)


def cmd_simulate(args, ctx):
    sc.run_simulate(ctx)


def cmd_reconstruct(args, ctx):
    _data_or_simulate(args, ctx)
    sc.run_analysis(ctx)
    sc.run_reconstruct(ctx)


def cmd_analyze(args, ctx):
    sc.run_analysis(ctx)


def cmd_propagate(args, ctx):
    if args.rho:
        try:
            rho = CoherenceMatrix.from_json(args.rho)
        except (OSError, ValueError, KeyError) as exc:
            raise ConfigError(f"cannot read coherence matrix {args.rho}: {exc}") from exc
        ctx.estimates["input"] = CoherenceMatrix(rho.rho, ctx.basis)
    sc.run_propagate(ctx, with_baseline=False)


def cmd_compare(args, ctx):
    if ctx.cfg.plane is None:
        raise ConfigError("compare needs an output plane in the config")
    _data_or_simulate(args, ctx)
    sc.run_reconstruct(ctx)
    sc.run_propagate(ctx, with_baseline=True)


def cmd_run(args, ctx):
    sc.run_simulate(ctx)
    sc.run_analysis(ctx)
    sc.run_reconstruct(ctx)
    sc.run_propagate(ctx)


COMMANDS = {
    "simulate": (cmd_simulate, "simulate sensor intensities for the configured state"),
    "reconstruct": (cmd_reconstruct, "reconstruct the coherence matrix from simulated or supplied data"),
    "analyze-svd": (cmd_analyze, "singular spectrum and informational completeness of the set-up"),
    "propagate": (cmd_propagate, "far-field intensity of the true (or a supplied) coherence matrix"),
    "compare": (cmd_compare, "tomographic versus standard far-field predictions"),
    "run": (cmd_run, "full pipeline"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shtomo", description="Shack-Hartmann coherence tomography")
    parser.add_argument("--list-fixtures", action="store_true", help="print bundled fixture names and exit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log diagnostics to stderr")
    sub = parser.add_subparsers(dest="command")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="config file, or the name of a bundled fixture")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
        p.add_argument("--format", choices=["json", "csv"], default="csv", help="format of tabular artifacts")
        if name in ("reconstruct", "compare"):
            p.add_argument("--data", help="intensity CSV (lens,pixel_u,pixel_v,value) instead of simulating")
        if name == "propagate":
            p.add_argument("--rho", help="coherence matrix JSON to propagate alongside the true state")
    return parser


def _fail(exc: Exception, code: int, stage: str | None = None) -> int:
    cause = exc.cause if isinstance(exc, ScenarioError) else exc
    payload = {"error": {"type": type(cause).__name__, "stage": stage, "message": str(cause)},
               "exit_code": code}
    print(json.dumps(payload), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.list_fixtures:
        print("\n".join(bundled_fixtures()))
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2**64:
        return _fail(ConfigError("--seed must be an unsigned 64-bit integer"), EXIT_CONFIG, "config")
    try:
        cfg = load_config(args.config, seed=args.seed, output_dir=args.out)
        ctx = sc.setup(cfg)
        COMMANDS[args.command][0](args, ctx)
        report = sc.finish(ctx, Path(cfg.output_dir), args.format)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG, "config")
    except ScenarioError as exc:
        code = EXIT_CONFIG if isinstance(exc.cause, ConfigError) else EXIT_NUMERICAL
        return _fail(exc, code, exc.stage)
    except OSError as exc:
        return _fail(exc, EXIT_NUMERICAL, "write")
    summary = {"command": args.command, "out": cfg.output_dir, "artifacts": len(report["artifacts"])}
    print(json.dumps(summary))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
