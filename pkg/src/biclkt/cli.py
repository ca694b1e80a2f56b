"""``biclkt`` command line: one subcommand per pipeline stage."""
from __future__ import annotations

import argparse
import logging
import sys

from . import config, dataio, pipeline
from .contrastive import DivergenceError
from .graph import ConvergenceError
from .prediction import CoverageError

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGENCE, EXIT_DATA = 0, 2, 3, 4, 5

# order matters: StaleArtifactError is a ConfigError, MissingArtifactError an OSError
ERRORS = (
    (pipeline.MissingArtifactError, EXIT_MISSING),
    (config.ConfigError, EXIT_CONFIG),
    (dataio.ConfigError, EXIT_CONFIG),
    ((DivergenceError, ConvergenceError), EXIT_DIVERGENCE),
    ((dataio.EmptyDatasetError, dataio.SplitError, CoverageError, OSError, KeyError), EXIT_DATA),
)

COMMANDS = {
    "synth": "simulate a synthetic interaction log",
    "ingest": "parse the interaction log named by data.path (or the synthetic log)",
    "build-graphs": "split students and build per-concept influence graphs",
    "pretrain": "contrastive pretraining; exports E2E and C2C embeddings",
    "train-head": "train the DKT (R) or DKVMN (M) prediction head",
    "evaluate": "score the head and the linear probe on test students",
    "ablate": "run the eval.grid_* ablation sweep",
    "pipeline": "ingest through ablate in one go",
}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="section.key = value file")
    common.add_argument("--seed", type=int, help="overrides run.seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads for ablation cells")
    common.add_argument("--out", metavar="DIR", default="biclkt-out", help="artifact directory")
    common.add_argument("--force", action="store_true", help="accept predecessors with another fingerprint")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(
        prog="biclkt", parents=[common],
        formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Bi-level contrastive pretraining and knowledge-tracing heads.",
        epilog="config keys (defaults; override in --config or BICLKT_<SECTION>_<KEY>):\n" + config.describe())
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, text in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=text, description=text,
                       formatter_class=argparse.RawDescriptionHelpFormatter,
                       epilog="config keys:\n" + config.describe())
    return parser


def exit_code(exc: BaseException) -> int | None:
    for kinds, code in ERRORS:
        if isinstance(exc, kinds):
            return code
    return None


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config.load(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        if args.threads < 1:
            raise config.ConfigError("--threads must be at least 1")
        ws = pipeline.Workspace(args.out, cfg, force=args.force, threads=args.threads)
        if args.command == "pipeline":
            pipeline.run_pipeline(ws)
        else:
            pipeline.run_stage(ws, args.command)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code(exc)
        if code is None:
            raise
        print(f"biclkt {args.command}: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
