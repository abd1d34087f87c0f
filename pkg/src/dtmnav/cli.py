"""``dtm-nav`` command line: sweeps, flights and the built-in self test.

Exit codes: 0 success, 1 validation error (bad arguments, config or a
failed self test), 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .scenario import SWEEP_PARAMS, ConfigError, ScenarioConfig, emit_report, load_config, run_flight, run_monte_carlo

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    # Usage errors are validation errors, not I/O errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dtm-nav", description="Terrain-referenced visual navigation experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sweep", help="Monte-Carlo sensitivity sweep")
    s.add_argument("--config", help="INI scenario file (defaults apply when omitted)")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    s.add_argument("--values", required=True, help="comma-separated sweep values")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--trials", type=int, help="override the trial count per value")
    s.add_argument("--seed", type=int, help="override the master seed")
    s.add_argument("--workers", type=int, help="worker processes")

    f = sub.add_parser("flight", help="closed-loop INS/vision flight")
    f.add_argument("--config", help="INI scenario file (defaults apply when omitted)")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--seed", type=int, help="override the master seed")
    f.add_argument("--force-fail", default="", help="comma-separated fix indices whose gates are forced to fail")

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return p


def _values(text: str) -> list:
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(float(part))
        except ValueError:
            raise ConfigError([f"--values: {part!r} is not a number"]) from None
    if not out:
        raise ConfigError(["--values: at least one value is required"])
    return out


def _indices(text: str) -> list:
    try:
        return [int(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise ConfigError([f"--force-fail: expected integers, got {text!r}"]) from None


def _config(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else ScenarioConfig()
    over = {k: getattr(args, k) for k in ("trials", "seed", "workers") if getattr(args, k, None) is not None}
    return replace(cfg, **over) if over else cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            from . import selftest

            return EXIT_OK if selftest.run() else EXIT_INVALID
        cfg = _config(args)
        if args.command == "sweep":
            result = run_monte_carlo(cfg, args.param, _values(args.values))
        else:
            result = run_flight(cfg, forced_failures=_indices(args.force_fail))
        for path in emit_report(result, args.out):
            print(path)
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"error: {problem}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
