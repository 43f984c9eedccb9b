"""Command-line interface.

``reconlab run --config cfg.txt`` executes the whole experiment;
individual stages are exposed as subcommands operating on the same
artifact directory, and ``verify`` re-checks manifest hashes and module
invariants.  Exit codes: 0 success, 1 invariant violation or stage
failure, 2 usage error.

The output directory resolves from ``--out``, then the config key
``out``, then ``$RECONLAB_OUT/<config stem>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .pipeline import (
    ConfigError,
    ExperimentConfig,
    OUT_ROOT_ENV,
    PipelineError,
    STAGES,
    run_experiment,
    run_stage,
    verify_artifacts,
)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH",
                        help="experiment config file (flat key = value lines)")
    common.add_argument("--out", metavar="DIR", default=None,
                        help=f"artifact directory (default: config 'out' key, then ${OUT_ROOT_ENV}/<config stem>)")
    common.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the config master seed")
    common.add_argument("--jobs", type=int, default=None, metavar="N",
                        help="worker processes for parallel stages (default: all cores); outputs are identical for any value")

    parser = argparse.ArgumentParser(
        prog="reconlab",
        description="Tabulate, reconstruct, and reidentify synthetic census-style microdata.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", parents=[common], help="run every stage in order")
    run.add_argument("--stage", choices=STAGES, default=None,
                     help="run only this stage instead of the full chain")

    for stage in STAGES:
        sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
    sub.add_parser("verify", parents=[common],
                   help="re-check manifest hashes and invariants over an artifact directory")
    return parser


def _resolve_out(args, cfg: ExperimentConfig) -> Path:
    if args.out:
        return Path(args.out)
    if cfg.get("out"):
        return Path(cfg.get("out"))
    root = os.environ.get(OUT_ROOT_ENV)
    if root:
        return Path(root) / Path(args.config).stem
    raise ConfigError(
        f"no output directory: pass --out, set the config key 'out', or export {OUT_ROOT_ENV}"
    )


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)

    try:
        cfg = ExperimentConfig.from_file(args.config)
        if args.seed is not None:
            cfg.raw["seed"] = str(args.seed)
            cfg.values["seed"] = args.seed
        out = _resolve_out(args, cfg)
    except ConfigError as exc:
        print(f"reconlab: {exc}", file=sys.stderr)
        return 2

    jobs = args.jobs if args.jobs and args.jobs > 0 else (os.cpu_count() or 1)

    try:
        if args.command == "verify":
            problems = verify_artifacts(cfg, out)
            for p in problems:
                print(f"violation: {p}", file=sys.stderr)
            return 1 if problems else 0
        if args.command == "run":
            if args.stage:
                run_stage(cfg, out, args.stage, jobs=jobs)
            else:
                run_experiment(cfg, out, jobs=jobs)
            return 0
        run_stage(cfg, out, args.command, jobs=jobs)
        return 0
    except ConfigError as exc:
        print(f"reconlab: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"reconlab: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
