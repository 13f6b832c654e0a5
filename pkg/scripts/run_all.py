"""Run every config in configs/ through the CLI and print a status table.

    python3 scripts/run_all.py [--out runs] [--skip order_scan banana_train] [--no-plots]
"""

import argparse
import logging
import time
from pathlib import Path

from spcd.cli import run

ROOT = Path(__file__).resolve().parents[1]
STATUS = {0: "ok", 1: "error", 2: "config error", 3: "diverged", 4: "failed"}


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    p.add_argument("--out", default=str(ROOT / "runs"))
    p.add_argument("--skip", nargs="*", default=[], help="config stems to skip")
    p.add_argument("--no-plots", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(message)s")

    results = []
    for cfg in sorted((ROOT / "configs").glob("*.ini")):
        if cfg.stem in args.skip:
            continue
        t0 = time.perf_counter()
        code = run(cfg, out=Path(args.out) / cfg.stem, plots=not args.no_plots)
        results.append((cfg.stem, STATUS.get(code, str(code)), time.perf_counter() - t0))
        print(f"{cfg.stem:20s} {results[-1][1]:12s} {results[-1][2]:7.1f}s", flush=True)
    return max((0 if s == "ok" else 1) for _, s, _ in results) if results else 0


if __name__ == "__main__":
    raise SystemExit(main())
