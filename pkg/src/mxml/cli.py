"""``mxml`` command line: train-base, train-wpn, eval, report, run."""

import argparse
import logging
import sys

from . import harness


def _bool(text):
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _seed(text):
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment TOML file")
    common.add_argument("--seed", type=_seed, help="override [experiment] seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--episodes", type=int, help="evaluation episodes per meta-test domain")
    common.add_argument("--transductive", type=_bool, help="use query instances in WPN scores (true/false)")
    common.add_argument("--mode", choices=harness.MODES, help="mixture mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mxml", description="Task-adaptive mixture of few-shot meta-learners.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train-base", parents=[common], help="train one base learner per domain and the pooled model")
    sub.add_parser("train-wpn", parents=[common], help="train the weight prediction network on frozen learners")
    sub.add_parser("eval", parents=[common], help="evaluate every model on the meta-test domains")
    sub.add_parser("report", parents=[common], help="rebuild results.csv, coefficients.csv and report.md")
    sub.add_parser("run", parents=[common], help="full pipeline")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = harness.apply_overrides(
            harness.load_config(args.config),
            seed=args.seed, out=args.out, episodes=args.episodes,
            transductive=args.transductive, mode=args.mode,
        )
    except harness.ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config not found: {exc.filename}", file=sys.stderr)
        return 2

    try:
        if args.command == "train-base":
            harness.train_base(cfg)
        elif args.command == "train-wpn":
            harness.train_wpn_stage(cfg)
        elif args.command == "eval":
            harness.eval_stage(cfg)
        elif args.command == "report":
            harness.emit_report(harness.read_episode_csvs(cfg.out), cfg.out, cfg.primary_mxml(), harness.report_note(cfg))
        else:
            harness.run_pipeline(cfg)
    except (FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    print(cfg.out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
