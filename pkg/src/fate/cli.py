"""``fate`` command line entry point.

Every failure prints exactly one line ``error: <code>: <message>`` to stderr
and exits non-zero.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import ConfigError, load_config
from .data import DataError

EXIT_USAGE = 2
EXIT_FAILURE = 1
_CODES = {FileNotFoundError: "not-found", KeyError: "invalid", ValueError: "invalid"}


class UsageError(Exception):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fate", description="Two-stage prompt tuning (adapt, then categorize).")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain-backbone", help="pretrain and checkpoint the frozen encoder(s)")
    s.add_argument("--config", required=True)

    s = sub.add_parser("run", help="run one seeded experiment")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", choices=("adapt", "classify", "all"), default="all")
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--out", default=None, help="override out_dir")

    for name, help_text in (("ablate", "DP x CP ablation grid"), ("ksweep", "top-k sweep (vl)"),
                            ("placement", "DP on/off the strong branch"), ("noisy-dp", "noisy-DP control")):
        s = sub.add_parser(name, help=help_text)
        s.add_argument("--config", required=True)
        s.add_argument("--out", default=None)

    s = sub.add_parser("export-features", help="dump classification features of a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--split", choices=("train", "test"), default="test")
    s.add_argument("--out", default=None)
    return p


def _dispatch(args) -> dict:
    if args.command == "export-features":
        path = harness.export_features(args.run, args.split, args.out)
        return dict(features=str(path))
    cfg = load_config(args.config)
    if args.command == "pretrain-backbone":
        return harness.pretrain(cfg)
    if args.command == "run":
        if args.seed is not None:
            cfg = cfg.replace(seed=args.seed)
        manifest = harness.run_experiment(cfg, args.stage, args.out)
        return dict(final=manifest["final"], out_dir=args.out or cfg.out_dir)
    suites = {"ablate": harness.run_ablation_suite, "ksweep": harness.run_k_sweep,
              "placement": harness.run_dp_placement, "noisy-dp": harness.run_noisy_dp_control}
    rows = suites[args.command](cfg, out_dir=args.out)
    return dict(results=rows, out_dir=args.out or cfg.out_dir)


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:
        # --help
        return 0 if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = _dispatch(args)
    except (ConfigError, DataError, harness.HarnessError, FileNotFoundError, ValueError, KeyError) as exc:
        code = getattr(exc, "code", None) or _CODES.get(type(exc), "invalid")
        msg = str(exc).replace("\n", " ")
        if msg.startswith(f"{code}: "):
            msg = msg[len(code) + 2:]
        print(f"error: {code}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    print(json.dumps(summary, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
