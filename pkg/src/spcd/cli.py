"""Command line entry point.

Usage::

    spcd run CONFIG [--seed U64] [--out DIR] [--no-plots]

The output directory is, in order of preference, ``--out``, the config's
``[experiment] out``, ``$SPCD_OUT/<config stem>`` or ``runs/<config stem>``.

Exit status: 0 success, 1 unexpected error, 2 config error (nothing is
written), 3 the dynamics diverged, 4 the run finished but its acceptance
check failed.
"""

from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .diagnostics import write_csv
from .experiments import execute, prepare

OK, ERROR, CONFIG_ERROR, DIVERGED, FAILED = 0, 1, 2, 3, 4
ENV_OUT = "SPCD_OUT"

log = logging.getLogger("spcd")


def version_string() -> str:
    """``<version>-g<commit>[-dirty]`` when run from a git checkout."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--abbrev=7"],
                             cwd=here, capture_output=True, text=True, timeout=5)
    except (OSError, subprocess.SubprocessError):
        return __version__
    desc = out.stdout.strip()
    return f"{__version__}-g{desc}" if out.returncode == 0 and desc else __version__


def resolve_outdir(cfg, config_path, cli_out) -> Path:
    if cli_out:
        return Path(cli_out)
    if cfg["experiment"]["out"]:
        return Path(cfg["experiment"]["out"])
    stem = Path(config_path).stem
    root = os.environ.get(ENV_OUT)
    return Path(root) / stem if root else Path("runs") / stem


def write_manifest(path, cfg, version, wall, status):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(cfg.to_ini())
        fh.write("[manifest]\n")
        fh.write(f"seed = {cfg.seed}\n")
        fh.write(f"version = {version}\n")
        fh.write(f"wall_time = {wall:.3f}\n")
        fh.write(f"status = {status}\n")


def run(config_path, seed=None, out=None, plots=True) -> int:
    try:
        cfg = load_config(config_path)
        if seed is not None:
            cfg = cfg.with_seed(seed)
        prepared = prepare(cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return CONFIG_ERROR
    outdir = resolve_outdir(cfg, config_path, out)
    outdir.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    result = execute(cfg, outdir, prepared)
    wall = time.perf_counter() - t0
    write_csv(outdir / "metrics.csv", result.header, result.rows)
    if result.diverged:
        status, code = "diverged", DIVERGED
    elif result.passed is not None and not result.passed:
        status, code = "failed", FAILED
    else:
        status, code = "ok", OK
    write_manifest(outdir / "manifest.ini", cfg, version_string(), wall, status)
    if plots and cfg["experiment"]["plots"] and result.plots:
        from .plots import plot_from_csv

        for spec in result.plots:
            plot_from_csv(outdir / "metrics.csv", outdir / f"{spec.name}.svg", spec)
    for key, val in result.summary.items():
        log.info("%s = %s", key, val)
    log.info("%s: %s (%.1f s) -> %s", cfg.kind, status, wall, outdir)
    return code


def _seed(s: str) -> int:
    v = int(s, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spcd", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("config")
    r.add_argument("--seed", type=_seed, default=None, help="override [experiment] seed")
    r.add_argument("--out", default=None, help="output directory")
    r.add_argument("--no-plots", action="store_true", help="skip SVG plots")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return CONFIG_ERROR if exc.code else OK
    try:
        return run(args.config, args.seed, args.out, not args.no_plots)
    except Exception:
        log.exception("run failed")
        return ERROR


if __name__ == "__main__":
    sys.exit(main())
