"""Command-line entry point: ``occgrasp <subcommand> [options]``.

Exit statuses: 0 success, 1 usage or config error, 2 missing artifact,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config
from .cvae import CollectionError
from .harness import OBJECTS
from .high import ACTION_NAMES
from .neural import NumericalError

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 by default, which we reserve for missing files
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    # SUPPRESS so a flag given before the subcommand is not reset by the subparser
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI file with [sim] [skills] [cvae] [dqn] [eval] sections")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (default 0)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory (else $OCCGRASP_OUT, else ./runs)")
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS)

    p = _Parser(prog="occgrasp", description="Hierarchical skill learning for occluded grasping.",
                parents=[common])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train-pivot", parents=[common], help="train the pivot skill")
    sub.add_parser("collect-contacts", parents=[common], help="collect successful contacts for the CVAE")
    sub.add_parser("train-cvae", parents=[common], help="train the contact CVAE")
    sub.add_parser("train-high", parents=[common], help="train the high-level selector")
    ev = sub.add_parser("eval", parents=[common], help="evaluation matrix, CSV and figures")
    ev.add_argument("--accessible", action="store_true", help="count pivot completion as success")
    ev.add_argument("--episodes", type=int, help="episodes per cell")
    ro = sub.add_parser("rollout", parents=[common], help="run one episode and write its trace")
    ro.add_argument("--object", default="nominal", choices=list(OBJECTS))
    ro.add_argument("--wall-length", type=float, default=0.2)
    ro.add_argument("--trace", help="trace file path")
    oc = sub.add_parser("oracle-check", parents=[common], help="DQN on ideal skills vs value iteration")
    oc.add_argument("--k-max", type=int, default=5)
    sub.add_parser("run-all", parents=[common], help="every stage in order")
    return p


def _run(args) -> int:
    cfg = load_config(args.config, args.out)
    seed = args.seed
    cmd = args.command
    if cmd == "train-pivot":
        pol = pipeline.stage_pivot(cfg, seed)
        print(f"pivot policy written to {cfg.out_dir}/{pipeline.PIVOT_FILE} "
              f"(best eval success {max((r[2] for r in pol.metrics), default=0.0):.2f})")
    elif cmd == "collect-contacts":
        ds = pipeline.stage_collect(cfg, seed)
        print(f"{len(ds)} contacts written to {cfg.out_dir}/{pipeline.CONTACTS_FILE}")
    elif cmd == "train-cvae":
        pipeline.stage_cvae(cfg, seed)
        print(f"CVAE written to {cfg.out_dir}/{pipeline.CVAE_FILE}")
    elif cmd == "train-high":
        pipeline.stage_high(cfg, seed)
        print(f"selector written to {cfg.out_dir}/{pipeline.HIGH_FILE}")
    elif cmd == "eval":
        if args.episodes is not None:
            if args.episodes < 1:
                raise UsageError("--episodes must be >= 1")
            cfg.eval.episodes_per_cell = args.episodes
        m = pipeline.stage_eval(cfg, seed, accessible=args.accessible or None)
        for r in m.to_rows():
            print(f"{r['object']:8s} l={r['wall_length']}  success {r['successes']}/{r['episodes']}  "
                  f"pivot {r['mean_pivot']} push {r['mean_push']} grasp {r['mean_grasp']}")
    elif cmd == "rollout":
        tr = pipeline.rollout(cfg, seed, args.object, args.wall_length, args.trace)
        skills = " ".join(ACTION_NAMES[r["skill"]] for r in tr.records)
        print(f"success={tr.success} decisions={len(tr.records)}: {skills}")
    elif cmd == "oracle-check":
        frac, bad, mdp = pipeline.oracle_check(cfg, args.k_max)
        print(f"oracle agreement: {100 * frac:.1f}% of {len(mdp.reachable())} reachable states")
        for s in bad[:10]:
            print(f"  disagree at {s}")
    elif cmd == "run-all":
        m = pipeline.run_all(cfg, seed)
        print(f"done; evaluation in {cfg.out_dir}/eval.csv ({len(m.cells)} cells)")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for name, default in (("config", None), ("seed", 0), ("out", None), ("quiet", False)):
            if not hasattr(args, name):
                setattr(args, name, default)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        return _run(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except pipeline.MissingArtifact as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalError, CollectionError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
