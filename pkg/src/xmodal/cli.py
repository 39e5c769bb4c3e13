"""``xmodal`` command-line entry point.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .harness import MODES, ConfigError, ExperimentConfig, run

log = logging.getLogger("xmodal")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage problems through an exception instead of exiting 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xmodal", description="Cross-modal distillation and active-learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for mode in MODES:
        p = sub.add_parser(mode, help=f"run a {mode} experiment")
        p.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (XMODAL_OUT overrides)")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for the seed fan-out")
    p = sub.add_parser("gradcheck", help="finite-difference check of every analytic gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=10, help="random instances per loss")
    p.add_argument("--out", type=Path, default=Path("out"))
    p = sub.add_parser("selftest", help="closed-form identities plus a short gradient check")
    p.add_argument("--out", type=Path, default=None)
    return parser


def _out_dir(args) -> Path:
    env = os.environ.get("XMODAL_OUT")
    return Path(env) if env else args.out


def _experiment(args) -> int:
    if args.config is not None:
        config = ExperimentConfig.load(args.config)
        if config.mode != args.command:
            raise ConfigError(f"config mode {config.mode!r} does not match subcommand {args.command!r}")
    else:
        config = ExperimentConfig(mode=args.command)
    if args.seed is not None:
        config = replace(config, seeds=(args.seed,))
    if args.jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    log.info("running %s with config %s", config.mode, config.config_hash())
    artifact = run(config, jobs=args.jobs)
    for path in artifact.write(_out_dir(args)):
        print(path)
    return EXIT_OK


def _gradcheck(args) -> int:
    from .gradcheck import run_gradcheck, summarize

    if args.instances < 1:
        raise ConfigError("--instances must be >= 1")
    results = run_gradcheck(args.instances, args.seed)
    summary = summarize(results)
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "gradcheck.json"
    path.write_text(json.dumps(summary, sort_keys=True, indent=1) + "\n")
    for name, err in sorted(summary["per_check"].items()):
        print(f"{'PASS' if err < 1e-4 else 'FAIL'} {name:<24} max rel error {err:.2e}")
    print(path)
    return EXIT_OK if summary["passed"] else EXIT_RUNTIME


def selftest_checks() -> list:
    """``(name, passed, detail)`` for each closed-form identity."""
    from .active import predictive_entropy
    from .alignment import infonce_loss
    from .distill import ccc_loss, kl_distill_loss
    from .evidential import dirichlet_uncertainty

    p = np.array([[0.2, 0.3, 0.5], [0.6, 0.3, 0.1]])
    y = np.array([0.5, -1.0, 2.0, 0.25])
    checks = [
        ("uncertainty at zero similarity", dirichlet_uncertainty(np.zeros((2, 4))).uncertainty, 0.5),
        ("kl of equal distributions", kl_distill_loss(p, p).value, 0.0),
        ("infonce at constant similarity", infonce_loss(np.full((5, 5), 0.3)).value, np.log(5)),
        ("ccc loss at perfect prediction", ccc_loss(y, y).value, 0.0),
        ("entropy of one-hot row", predictive_entropy(np.eye(3)), 0.0),
        ("entropy of uniform row", predictive_entropy(np.full((1, 4), 0.25)), np.log(4)),
    ]
    out = []
    for name, got, want in checks:
        err = float(np.max(np.abs(np.asarray(got) - want)))
        out.append((name, err <= 1e-9, err))
    return out


def _selftest(args) -> int:
    from .gradcheck import run_gradcheck, summarize

    rows = selftest_checks()
    grad = summarize(run_gradcheck(2, 0))
    rows.append(("gradient check (2 instances per loss)", grad["passed"], grad["max_error"]))
    for name, ok, err in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name} ({err:.1e})")
    if args.out is not None or os.environ.get("XMODAL_OUT"):
        out = _out_dir(args)
        out.mkdir(parents=True, exist_ok=True)
        doc = [{"check": n, "passed": ok, "error": e} for n, ok, e in rows]
        (out / "selftest.json").write_text(json.dumps(doc, indent=1) + "\n")
    return EXIT_OK if all(ok for _, ok, _ in rows) else EXIT_RUNTIME


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gradcheck":
            return _gradcheck(args)
        if args.command == "selftest":
            return _selftest(args)
        return _experiment(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # anything past config validation is a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
