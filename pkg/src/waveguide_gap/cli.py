"""Command line entry point: ``waveguide-gap <command> [--config FILE] [--out DIR]``.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 solver failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig, load_config
from .fem import NumericalBreakdownError, PreconditionError

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2, 3

COMMANDS = ("cross-section", "polarization", "bands", "gap-scan", "verify")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="waveguide-gap",
                                description="Band gaps of a periodically perturbed waveguide")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="YAML experiment file (defaults if omitted)")
    p.add_argument("--out", help="output directory (overrides output.directory)")
    p.add_argument("--threads", type=int, default=1, help="concurrent cell solves")
    p.add_argument("--seed", type=int, default=None, help="seed for start vectors")
    p.add_argument("--checks", default=None,
                   help="comma separated subset for verify (empty string selects none)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        out = args.out or cfg.output.directory
        from . import experiments as ex

        if args.command == "cross-section":
            study = ex.run_cross_section(cfg, out)
            print(f"M = {[round(float(m), 6) for m in study.M_extrapolated]}  "
                  f"dnV1 = {study.dnV1:.6g}  gap condition: {study.gap_condition_ok}")
        elif args.command == "polarization":
            pol = ex.run_polarization(cfg, out)
            print(f"P_theta = {pol.P_theta:.6g}")
        elif args.command == "bands":
            payload = ex.run_bands(cfg, out, workers=args.threads)
            for cell in payload["cells"]:
                print(f"h = {cell['h']:g}: gaps {cell['gap']['gaps'][:1]}  "
                      f"bracketing ok: {cell['bracketing']['ok']}")
        elif args.command == "gap-scan":
            res = ex.run_gap_scan(cfg, out, workers=args.threads)
            for r in res.rows:
                print(f"h = {r[0]:g}: gap {r[1]:.6g}  predicted {r[2]:.6g}  ratio {r[3]:.3f}")
            if res.slope is not None:
                print(f"log-log slope {res.slope:.3f}  CI {res.slope_ci}")
        else:
            checks = None
            if args.checks is not None:
                checks = [c.strip() for c in args.checks.split(",") if c.strip()]
            results = ex.run_verify(cfg, out, checks, workers=args.threads)
            for c in results:
                print(f"{'PASS' if c.ok else 'FAIL'} {c.name}")
            if not all(c.ok for c in results):
                return EXIT_VERIFY
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, PreconditionError):
            print(f"solver precondition failed: {exc}", file=sys.stderr)
            return EXIT_SOLVER
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalBreakdownError, RuntimeError) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
