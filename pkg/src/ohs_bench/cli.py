"""``ohs-bench`` command line.

Exit codes: 0 success, 1 configuration or stage-dependency error, 2 some jobs
failed (reports are still written for the jobs that succeeded).
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import ConfigError, load_config, parse_only
from .pipeline import STAGES, Pipeline, StageDependencyError

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ohs-bench", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=(*STAGES, "run"), help="stage to execute; 'run' executes all")
    p.add_argument("--config", required=True, help="TOML pipeline config")
    p.add_argument("--only", default=None, help='restrict grid cells, e.g. "algorithm=BC,hidden_size=64"')
    p.add_argument("--out", default=None, help="output directory (env: OHS_BENCH_OUT)")
    p.add_argument("--workers", type=int, default=None, help="worker processes (env: OHS_BENCH_WORKERS)")
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.replace(master_seed=args.seed)
        out = args.out or os.environ.get("OHS_BENCH_OUT") or cfg.output_dir
        workers = args.workers
        if workers is None and os.environ.get("OHS_BENCH_WORKERS"):
            try:
                workers = int(os.environ["OHS_BENCH_WORKERS"])
            except ValueError:
                raise ConfigError("OHS_BENCH_WORKERS must be an integer") from None
        pipe = Pipeline(cfg, out=out, workers=workers, only=parse_only(args.only))
        if args.stage == "run":
            pipe.run()
        else:
            pipe.run_stage(args.stage)
    except (ConfigError, StageDependencyError) as exc:
        print(f"ohs-bench: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    failed = pipe.manifest.failures()
    if failed:
        print(f"ohs-bench: {len(failed)} grid cell(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
