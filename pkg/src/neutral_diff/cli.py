"""Command-line front end.

Exit status: 0 success, 1 check below threshold or failed trial,
2 hypotheses fail, 3 no convergence, 4 malformed configuration.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, fixed_point_solver as fps
from .config import PRESETS, ConfigError, RunConfig, load_config
from .expr import EvaluationError, ExprSyntaxError
from .hypothesis_checker import HypothesisReport, choose_constants
from .parameter_dependence import FamilySpec, MemberFailure, solve_family
from .sequence_model import SeriesTruncationError, parse_expr

EXIT_OK = 0
EXIT_BELOW_THRESHOLD = 1
EXIT_HYPOTHESIS = 2
EXIT_NONCONVERGENCE = 3
EXIT_CONFIG = 4

log = logging.getLogger("neutral_diff")


def _dump(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out if args.out is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check(cfg: RunConfig) -> HypothesisReport:
    s = cfg.solver
    return choose_constants(cfg.equation, s.d, s.check_window)


def cmd_check(args, cfg: RunConfig) -> int:
    report = _check(cfg)
    out = _out_dir(args, cfg)
    _dump(out / "report.json", report.to_dict())
    contraction = analysis.contraction_report(cfg.equation, report)
    _dump(out / "contraction.json", contraction.to_dict())
    failed = [k for k in report.BOOLEAN_FIELDS if not getattr(report, k)]
    print(f"hypotheses: {'ok' if not failed else 'FAILED ' + ', '.join(failed)}")
    print(f"gamma_plus={report.gamma_plus} P={report.P} n3={report.n3} n_switch={report.n_switch} "
          f"C={report.C} theta={contraction.theta} n4={contraction.n4}")
    return EXIT_OK if not failed else EXIT_HYPOTHESIS


def cmd_solve(args, cfg: RunConfig) -> int:
    report = _check(cfg)
    out = _out_dir(args, cfg)
    _dump(out / "report.json", report.to_dict())
    if not report.hypotheses_ok:
        print("hypotheses fail; run `check` for details", file=sys.stderr)
        return EXIT_HYPOTHESIS
    s = cfg.solver
    contraction = analysis.contraction_report(cfg.equation, report)
    initial = s.initial if args.initial is None else args.initial
    try:
        window, stats = fps.solve(cfg.equation, report, s.N, s.tol, s.max_iter, initial)
    except fps.NonConvergenceError as exc:
        _dump(out / "stats.json", {**exc.stats.to_dict(), "theta": contraction.theta, "error": str(exc)})
        print(str(exc), file=sys.stderr)
        return EXIT_NONCONVERGENCE
    window.write_csv(out / "solution.csv")
    payload = {**stats.to_dict(), "theta": contraction.theta, "n4": contraction.n4,
               "initial": initial, "extension_failures": window.extension_failures}
    lo = max(report.n_switch, window.residual_start)
    res = window.residuals[lo - window.residual_start:]
    payload["max_abs_residual_from_switch"] = _nan_max(res)
    _dump(out / "stats.json", payload)
    print(f"iterations={stats.iterations} final_delta={stats.final_delta:.3e} "
          f"rate={stats.measured_rate:.4g} theta={contraction.theta} certified={stats.certified}")
    return EXIT_OK


def _nan_max(values) -> Optional[float]:
    arr = np.abs(np.asarray(values, dtype=float))
    arr = arr[np.isfinite(arr)]
    return float(arr.max()) if arr.size else None


def _verify_window(args, cfg: RunConfig) -> fps.SolutionWindow:
    if args.sequence is not None:
        if args.csv is not None:
            raise ConfigError("give either a CSV file or --sequence, not both")
        try:
            seq = parse_expr(args.sequence)
        except ExprSyntaxError as exc:
            raise ConfigError(str(exc), "--sequence") from None
        lo = cfg.equation.x_start if args.first is None else args.first
        hi = args.last if args.last is not None else cfg.solver.N
        n = np.arange(lo, hi + 1, dtype=float)
        return fps.SolutionWindow(lo, seq.values(n), lo)
    if args.csv is None:
        raise ConfigError("verify needs a CSV file or --sequence")
    try:
        return fps.SolutionWindow.read_csv(args.csv)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read solution: {exc}", "", str(args.csv)) from None


def cmd_verify(args, cfg: RunConfig) -> int:
    eq = cfg.equation
    x = _verify_window(args, cfg)
    lo, hi = fps.residual_range(x, eq)
    if hi < lo:
        raise ConfigError(f"data range [{x.start}, {x.end}] too short for a residual")
    res = fps.residuals(x, eq, lo, hi)
    rel = fps.relative_residuals(x, eq, lo, hi)
    x = fps.SolutionWindow(x.start, x.values, x.n_switch, residuals=res, residual_start=lo)
    out = _out_dir(args, cfg)
    x.write_csv(out / "verified.csv")
    guarded = set(int(n) for n in fps.guarded_indices(eq, lo, hi))
    for n in sorted(guarded):
        log.warning("small denominator at n=%d; row excluded from the summary", n)
    keep = np.array([n not in guarded for n in range(lo, hi + 1)])
    metric = rel if args.relative else res
    vals = np.abs(metric[keep])
    finite = vals[np.isfinite(vals)]
    summary = {
        "range": [lo, hi],
        "kind": "relative" if args.relative else "absolute",
        "max": float(finite.max()) if finite.size else None,
        "mean": float(finite.mean()) if finite.size else None,
        "undefined_rows": int(vals.size - finite.size),
        "excluded_rows": sorted(guarded),
        "threshold": args.threshold,
    }
    passed = finite.size == vals.size and finite.size > 0 and summary["max"] < args.threshold
    summary["ok"] = bool(passed)
    _dump(out / "verify.json", summary)
    print(f"{summary['kind']} residual on [{lo}, {hi}]: max={summary['max']} mean={summary['mean']} "
          f"excluded={len(guarded)} -> {'ok' if passed else 'above threshold'}")
    return EXIT_OK if passed else EXIT_BELOW_THRESHOLD


def cmd_sweep(args, cfg: RunConfig) -> int:
    fam = cfg.family
    if fam is None:
        raise ConfigError("sweep needs a [family] section")
    try:
        spec = FamilySpec(cfg.equation, fam.g, fam.params, fam.limit, fam.D1, fam.D2, fam.d1, fam.d2)
    except ValueError as exc:
        raise ConfigError(str(exc), "family") from None
    s = cfg.solver
    out = _out_dir(args, cfg)
    try:
        rep = solve_family(spec, s.d, s.N, s.tol, s.max_iter, fam.initial, s.window_end,
                           fam.samples, cfg.analysis.seed if args.seed is None else args.seed)
    except MemberFailure as exc:
        _dump(out / "family.json", {"error": str(exc), "member": exc.index})
        print(str(exc), file=sys.stderr)
        cause = exc.__cause__
        return EXIT_NONCONVERGENCE if isinstance(cause, fps.NonConvergenceError) else EXIT_HYPOTHESIS
    for m, x in enumerate(rep.solutions):
        x.write_csv(out / f"solution_u{m}.csv")
    (out / "pairwise.csv").write_text(rep.pairwise_csv())
    _dump(out / "family.json", rep.to_dict())
    print(f"theta1={rep.theta1:.6g} theta2={rep.theta2:.6g} bounds_ok={rep.all_bounds_ok} "
          f"monotone={rep.monotone} limit_check={rep.limit_check:.3e}")
    return EXIT_OK if rep.all_bounds_ok else EXIT_BELOW_THRESHOLD


def cmd_mnc(args, cfg: RunConfig) -> int:
    report = _check(cfg)
    out = _out_dir(args, cfg)
    if not report.hypotheses_ok:
        print("hypotheses fail; run `check` for details", file=sys.stderr)
        return EXIT_HYPOTHESIS
    contraction = analysis.contraction_report(cfg.equation, report)
    _dump(out / "contraction.json", contraction.to_dict())
    if not contraction.valid:
        print("no valid contraction threshold n4 on the window", file=sys.stderr)
        return EXIT_HYPOTHESIS
    a = cfg.analysis
    seed = a.seed if args.seed is None else args.seed
    trials = analysis.darbo_trials(cfg.equation, report, contraction, cfg.solver.N,
                                   a.trials, a.members, seed)
    (out / "darbo.csv").write_text(analysis.darbo_csv(trials))
    n_ok = sum(t.ok for t in trials)
    print(f"{n_ok}/{len(trials)} trials within c1 + c2 = {contraction.c1 + contraction.c2:.6g}")
    return EXIT_OK if n_ok == len(trials) else EXIT_BELOW_THRESHOLD


COMMANDS = {"check": cmd_check, "solve": cmd_solve, "verify": cmd_verify,
            "sweep": cmd_sweep, "mnc": cmd_mnc}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neutral-diff",
        description="Bounded solutions of second-order nonlinear neutral difference equations.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "check": "verify hypotheses and write report.json",
        "solve": "iterate to a fixed point and write solution.csv and stats.json",
        "verify": "evaluate residuals of given data",
        "sweep": "solve a parameter family and check Lipschitz dependence",
        "mnc": "random-ensemble check of the noncompactness contraction",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True,
                       help=f"TOML file or preset name ({', '.join(PRESETS)})")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="override the analysis seed")
        if name == "solve":
            p.add_argument("--initial", type=float, default=None, help="constant initial guess")
        if name == "verify":
            p.add_argument("csv", nargs="?", default=None, help="CSV with columns n,x")
            p.add_argument("--sequence", default=None, help="generate data from an expression in n")
            p.add_argument("--first", type=int, default=None, help="first index for --sequence")
            p.add_argument("--last", type=int, default=None, help="last index for --sequence")
            p.add_argument("--threshold", type=float, default=1e-9)
            p.add_argument("--relative", action="store_true",
                           help="divide each residual by its largest term")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EvaluationError, SeriesTruncationError, fps.WindowTooShortError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
