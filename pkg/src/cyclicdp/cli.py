"""Command line entry point: ``cyclicdp run`` and ``cyclicdp accountant``."""

from __future__ import annotations

import argparse
import logging
import math
import sys
from fractions import Fraction
from pathlib import Path

from . import config as config_mod
from .config import ConfigError
from .federation import InvariantError
from .rdp_accountant import DEFAULT_ORDERS, InfinitePrivacyLoss, compute_epsilon

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INVARIANT = 4

log = logging.getLogger("cyclicdp")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def _number(text: str) -> float:
    """Accepts plain floats and fractions such as 100/27395."""
    try:
        return float(Fraction(text)) if "/" in text else float(text)
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cyclicdp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="train and evaluate the configured arms")
    r.add_argument("config", help="YAML config file or preset name (eicu_like, tcga_like)")
    r.add_argument("--seed", type=int)
    r.add_argument("--output-dir")
    r.add_argument("--dry-run", action="store_true", help="validate and print the resolved plan")
    r.add_argument("--clip-from-paper", action="store_true", help="set clip norm to sigma / b")
    r.add_argument("--fidelity-postcheck", action="store_true",
                   help="check the budget after each step instead of before")
    r.add_argument("--parallel-arms", type=int, default=1, metavar="N")

    a = sub.add_parser("accountant", help="epsilon for a subsampled Gaussian schedule")
    a.add_argument("--q", type=_number, required=True, help="sampling rate b/|D|")
    a.add_argument("--sigma", type=_number, required=True)
    a.add_argument("--steps", type=int, required=True)
    a.add_argument("--delta", type=_number, default=1e-5)
    return p


def cmd_accountant(args) -> int:
    if not 0.0 <= args.q <= 1.0:
        print("error: --q must be in [0, 1]", file=sys.stderr)
        return EXIT_CONFIG
    if args.sigma < 0 or args.steps < 0 or not 0.0 < args.delta < 1.0:
        print("error: need sigma >= 0, steps >= 0 and 0 < delta < 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        eps, order = compute_epsilon(args.q, args.sigma, args.steps, args.delta, DEFAULT_ORDERS)
    except InfinitePrivacyLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"epsilon={eps:.6f} best_order={order} q={args.q:.8g} sigma={args.sigma:g} "
          f"steps={args.steps} delta={args.delta:g}")
    return EXIT_OK


def cmd_run(args) -> int:
    from .experiment import execute, write_outputs

    overrides = {"seed": args.seed, "output_dir": args.output_dir}
    if args.clip_from_paper:
        overrides["dp.clip_from_paper"] = True
    if args.fidelity_postcheck:
        overrides["fidelity_postcheck"] = True
    if args.parallel_arms < 1:
        print("error: --parallel-arms must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    cfg = config_mod.resolve(args.config, overrides)
    if math.isinf(cfg.budget.epsilon):
        log.warning("unbounded epsilon budget: private arms will never stop early")
    if args.dry_run:
        sys.stdout.write(config_mod.dump(cfg))
        print(f"# clip_norm in effect: {cfg.clip_norm:g}")
        return EXIT_OK
    out_dir = Path(cfg.output_dir)
    results = execute(cfg, parallel=args.parallel_arms)
    rows = write_outputs(cfg, results, out_dir)
    sys.stdout.write((out_dir / "report.txt").read_text(encoding="utf-8"))
    log.info("wrote %d report rows to %s", len(rows), out_dir)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "accountant":
            return cmd_accountant(args)
        return cmd_run(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantError as e:
        print(f"invariant violated: {e}", file=sys.stderr)
        return EXIT_INVARIANT
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
