"""Command-line interface.

Every invocation writes exactly one JSON document to stdout, carrying a
``schema_version`` field; human-readable diagnostics go to stderr. Exit codes:
0 on success, 1 on usage or input errors, 2 on numerical failures.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from fractions import Fraction
from math import lcm
from pathlib import Path

import numpy as np

from . import __version__
from .errors import NoConvergence, NumericalError, SinkhornCLTError
from .inference import (
    SECOND_ORDER,
    OPERATOR_FORM,
    FunctionalSpec,
    cost_ci,
    divergence_ci,
    functional_ci,
    h0_test,
)
from .measures import (
    DiscreteMeasure,
    empirical_from_points,
    empirical_from_sample,
    load_measure,
    load_points,
)
from .montecarlo import SimulationConfig, run_replications
from .sinkhorn import DEFAULT_MAX_ITER, DEFAULT_TOL, sinkhorn_divergence, solve, xi_to_csv

SCHEMA_VERSION = 1
MAX_RECOVERED_N = 10**7

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERICAL = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- JSON output ---------------------------------------------------------------


def _encode(obj) -> str:
    """JSON with floats at 17 significant digits; non-finite floats become null."""
    if obj is None or isinstance(obj, bool):
        return "null" if obj is None else ("true" if obj else "false")
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{_encode(str(k))}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    raise TypeError(f"cannot encode {type(obj).__name__}")


def _emit(command: str, body: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, "command": command, **body}
    sys.stdout.write(_encode(doc) + "\n")


# -- helpers -------------------------------------------------------------------


def _positive(kind):
    def parse(text):
        value = kind(text)
        if not value > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return value

    return parse


def _probability(text):
    value = float(text)
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {text}")
    return value


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epsilon", type=_positive(float), required=True, help="regularization strength")
    p.add_argument("--tol", type=_positive(float), default=DEFAULT_TOL)
    p.add_argument("--max-iter", type=_positive(int), default=DEFAULT_MAX_ITER)


def recover_sample_size(measure: DiscreteMeasure) -> int:
    """Smallest n for which every weight is a multiple of 1/n.

    Used when an empirical measure is given without its sample size.
    """
    denominators = [Fraction(float(w)).limit_denominator(MAX_RECOVERED_N).denominator
                    for w in measure.weights]
    n = 1
    for d in denominators:
        n = lcm(n, d)
        if n > MAX_RECOVERED_N:
            break
    if n > MAX_RECOVERED_N or np.abs(measure.weights * n - np.round(measure.weights * n)).max() > 1e-6:
        raise UsageError("cannot recover the sample size from the weights; pass --n/--m")
    return n


def _load_eta(path, P: DiscreteMeasure, Q: DiscreteMeasure) -> FunctionalSpec:
    try:
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
    except (ValueError, OSError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    if arr.shape != (P.size, Q.size):
        raise UsageError(
            f"{path}: eta has shape {arr.shape}, expected {(P.size, Q.size)} (atoms after merging)"
        )
    return FunctionalSpec.matrix(arr)


# -- commands ------------------------------------------------------------------


def cmd_solve(args) -> int:
    P, Q = load_measure(args.p), load_measure(args.q)
    sol = solve(P, Q, args.epsilon, args.tol, args.max_iter)
    if args.xi_out:
        Path(args.xi_out).write_text(xi_to_csv(sol))
    _emit("solve", sol.to_dict())
    return EXIT_OK


def cmd_divergence(args) -> int:
    P, Q = load_measure(args.p), load_measure(args.q)
    res = sinkhorn_divergence(P, Q, args.epsilon, args.tol, args.max_iter)
    _emit("divergence", {"epsilon": args.epsilon, **res.to_dict()})
    return EXIT_OK


def cmd_infer(args) -> int:
    mode = args.mode
    if args.t is not None and mode != "rcol":
        raise UsageError(f"--t only applies to --mode rcol, not {mode}")
    if args.eta is not None and mode != "functional":
        raise UsageError(f"--eta only applies to --mode functional, not {mode}")
    if mode == "rcol" and args.t is None:
        raise UsageError("--mode rcol needs --t")
    if mode == "functional" and args.eta is None:
        raise UsageError("--mode functional needs --eta")
    two_sample = args.m is not None or args.lam is not None
    if mode == "cost" and two_sample:
        raise UsageError("--mode cost is one-sample only; drop --m/--lambda")

    P, Q = load_measure(args.p), load_measure(args.q)
    n = args.n if args.n is not None else recover_sample_size(P)
    m = None
    if two_sample:
        m = args.m if args.m is not None else recover_sample_size(Q)
    lam = args.lam
    common = dict(tol=args.tol, max_iter=args.max_iter)

    if mode == "cost":
        report = cost_ci(P, Q, args.epsilon, args.level, n, **common)
    elif mode == "divergence":
        report = divergence_ci(P, Q, args.epsilon, args.level, n, m, lam, **common)
    else:
        if mode == "ds":
            eta = FunctionalSpec.half_squared_distance()
        elif mode == "rcol":
            if args.t < 0:
                raise UsageError("--t must be nonnegative")
            eta = FunctionalSpec.threshold(args.t)
        else:
            eta = _load_eta(args.eta, P, Q)
        report = functional_ci(eta, P, Q, args.epsilon, args.level, n, m, lam, kind=mode, **common)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    body = report.to_dict()
    body.update({"mode": mode, "epsilon": args.epsilon, "n": n, "m": m})
    _emit("infer", body)
    return EXIT_OK


def cmd_h0test(args) -> int:
    seeds = np.random.SeedSequence(args.seed).spawn(2)
    sample_rng, limit_rng = (np.random.default_rng(s) for s in seeds)
    common = dict(level=args.level, draws=args.draws, form=args.form,
                  tol=args.tol, max_iter=args.max_iter)
    if args.samples2 is not None:
        if args.samples is None:
            raise UsageError("the two-sample test needs --samples and --samples2")
        if args.p is not None or args.n is not None:
            raise UsageError("--samples2 replaces --p/--n")
        x, y = load_points(args.samples), load_points(args.samples2)
        result = h0_test(empirical_from_points(x), len(x), args.epsilon, limit_rng,
                         sample2=empirical_from_points(y), m=len(y), **common)
        sizes = {"n": len(x), "m": len(y)}
    else:
        if args.p is None:
            raise UsageError("h0test needs --p (or --samples with --samples2)")
        if (args.samples is None) == (args.n is None):
            raise UsageError("pass exactly one of --samples or --n")
        P = load_measure(args.p)
        if args.samples is not None:
            x = load_points(args.samples)
            n, sample = len(x), empirical_from_points(x)
        else:
            n, sample = args.n, empirical_from_sample(P, args.n, sample_rng)
        result = h0_test(sample, n, args.epsilon, limit_rng, reference=P, **common)
        sizes = {"n": n}
    _emit("h0test", {"epsilon": args.epsilon, "seed": args.seed, **sizes, **result.to_dict()})
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        cfg = SimulationConfig.load(args.config)
        if args.workers is not None:
            cfg = SimulationConfig(**{**cfg.__dict__, "workers": args.workers})
        if args.replicates_out:
            cfg = SimulationConfig(**{**cfg.__dict__, "keep_replicates": True})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    report = run_replications(cfg)
    if report.failures:
        print(f"warning: {report.failures} replicates did not converge", file=sys.stderr)
    if args.replicates_out:
        Path(args.replicates_out).write_text(report.replicates_csv())
    doc = report.to_dict()
    doc.pop("replicates", None)
    _emit("simulate", {"seed": cfg.seed, **doc})
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="sinkhorn-clt",
        description="Entropic optimal transport with central-limit inference.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve the entropic transport problem")
    p.add_argument("--p", required=True, help="source measure (CSV or JSON)")
    p.add_argument("--q", required=True, help="target measure (CSV or JSON)")
    _add_solver_flags(p)
    p.add_argument("--xi-out", help="write the coupling density as CSV")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("divergence", help="debiased Sinkhorn divergence")
    p.add_argument("--p", required=True)
    p.add_argument("--q", required=True)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("infer", help="plug-in confidence intervals from empirical measures")
    p.add_argument("--mode", required=True, choices=("cost", "functional", "ds", "rcol", "divergence"))
    p.add_argument("--p", required=True, help="empirical source measure")
    p.add_argument("--q", required=True, help="target measure (empirical in the two-sample case)")
    p.add_argument("--eta", help="dense CSV matrix of the test function (mode functional)")
    p.add_argument("--t", type=float, help="squared-distance threshold (mode rcol)")
    p.add_argument("--n", type=_positive(int), help="size of the P sample (default: from weights)")
    p.add_argument("--m", type=_positive(int), help="size of the Q sample; makes the problem two-sample")
    p.add_argument("--lambda", dest="lam", type=_probability,
                   help="two-sample proportion m/(n+m) (default: from n and m)")
    p.add_argument("--level", type=_probability, default=0.95)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("h0test", help="test P_n against P (or two samples) under H0")
    p.add_argument("--p", help="hypothesized measure")
    p.add_argument("--samples", help="CSV of observed points, one per row")
    p.add_argument("--samples2", help="second CSV of observed points (two-sample test)")
    p.add_argument("--n", type=_positive(int), help="draw a synthetic sample of this size from --p")
    p.add_argument("--level", type=_probability, default=0.95)
    p.add_argument("--draws", type=_positive(int), default=100_000,
                   help="Monte Carlo draws from the limit law")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--form", choices=(SECOND_ORDER, OPERATOR_FORM), default=SECOND_ORDER,
                   help="which expression of the limit spectrum to use")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_h0test)

    p = sub.add_parser("simulate", help="Monte Carlo validation of a limit law")
    p.add_argument("--config", required=True, help="JSON simulation config")
    p.add_argument("--workers", type=_positive(int), help="override the config's worker count")
    p.add_argument("--replicates-out", help="write per-replicate values as CSV")
    p.set_defaults(func=cmd_simulate)
    return parser


def _fail(command: str, code: int, exc: Exception, **extra) -> int:
    print(f"error: {exc}", file=sys.stderr)
    _emit(command, {"error": type(exc).__name__, "message": str(exc), **extra})
    return code


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    commands = ("solve", "divergence", "infer", "h0test", "simulate")
    command = next((a for a in argv if a in commands), "unknown")
    try:
        args = parser.parse_args(argv)
        command = args.command
        return args.func(args)
    except UsageError as exc:
        return _fail(command, EXIT_USAGE, exc)
    except NoConvergence as exc:
        return _fail(command, EXIT_NUMERICAL, exc,
                     residual=exc.residual, iterations=exc.iterations)
    except NumericalError as exc:
        return _fail(command, EXIT_NUMERICAL, exc)
    except (SinkhornCLTError, ValueError, OSError) as exc:
        return _fail(command, EXIT_USAGE, exc)


if __name__ == "__main__":
    sys.exit(main())
