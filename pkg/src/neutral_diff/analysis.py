"""Lipschitz constants, the contraction factor θ, solution comparison and an
empirical measure-of-noncompactness check.

For ``x, y`` in the ball ``B`` of radius ``d`` the operator satisfies, per index,

    |(Tx)_n - (Ty)_n| <= θ_n sup_{m >= n-k} |x_m - y_m|,
    θ_n = |p_n| + L_d A_n + L_α B_n,

with ``A_n = Σ_{j>=n} L_j |1/r_j| Σ_{i>=j}|a_i|``, ``B_n`` the same with ``|q_i|``
and ``L_j`` the Lipschitz constant of ``t -> t^{1/γ_j}`` on ``[-c_j, c_j]``,
``c_j = |1/r_j| Σ_{i>=j}(M_d|a_i| + d^α|q_i|)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fixed_point_solver import SolutionWindow, WindowOperator
from .hypothesis_checker import CoefficientTable, EquationSpec, HypothesisReport, build_table
from .sequence_model import SeriesTruncationError, power_lipschitz, suffix_sums

SLOPE_GRID = 100_001
SLOPE_INFLATION = 1.01
DARBO_SLACK = 1e-9


class MisalignedWindowsError(ValueError):
    pass


class LeftBallError(RuntimeError):
    """An image under ``T`` left the ball ``B``; the constants are wrong."""


@dataclass
class ContractionReport:
    L_d: float
    L_alpha: float
    L_gamma: list
    gamma_start: int
    c1: Optional[float] = None
    c2: Optional[float] = None
    theta: Optional[float] = None
    theta_literal: Optional[float] = None
    n4: Optional[int] = None
    valid: bool = False
    theta_profile: list = field(default_factory=list)
    A: Optional[np.ndarray] = field(default=None, repr=False, compare=False)
    B: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        return {
            "L_d": self.L_d,
            "L_alpha": self.L_alpha,
            "L_gamma": [_finite_or_none(v) for v in self.L_gamma],
            "gamma_start": self.gamma_start,
            "c1": self.c1,
            "c2": self.c2,
            "theta": self.theta,
            "theta_literal": self.theta_literal,
            "n4": self.n4,
            "valid": self.valid,
            "theta_profile": self.theta_profile,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)


def _finite_or_none(v: float):
    return float(v) if math.isfinite(v) else None


def max_slope(f, d: float, points: int = SLOPE_GRID) -> float:
    """Largest finite-difference slope of ``f`` on a uniform grid of ``[-d, d]``."""
    grid = np.linspace(-d, d, points)
    vals = f.values(grid)
    slopes = np.abs(np.diff(vals)) / np.diff(grid)
    if not np.all(np.isfinite(slopes)):
        raise ValueError("slope estimate of f is not finite")
    return float(np.max(slopes))


def _table_for(eq: EquationSpec, report: HypothesisReport, window_end: int) -> CoefficientTable:
    if report.table is not None and report.table.horizon >= window_end:
        return report.table
    return build_table(eq, window_end)


def lipschitz_constants(eq: EquationSpec, d: float, report: HypothesisReport,
                        window_end: Optional[int] = None) -> ContractionReport:
    window_end = report.window_end if window_end is None else window_end
    L_d = SLOPE_INFLATION * max_slope(eq.f, d)
    alpha = eq.alpha.value
    L_alpha = alpha * d ** (alpha - 1)
    try:
        table = _table_for(eq, report, window_end)
    except SeriesTruncationError:
        return ContractionReport(L_d, L_alpha, [], eq.start)
    c = _interval_bounds(table, report.M_d, d ** alpha)
    L_gamma = power_lipschitz(c, table.coef.gnum, table.coef.gden)
    w = window_end - table.start + 1
    return ContractionReport(L_d, L_alpha, [float(v) for v in L_gamma[:w]], table.start)


def _interval_bounds(table: CoefficientTable, M_d: float, d_alpha: float) -> np.ndarray:
    return np.abs(1.0 / table.coef.r) * (M_d * table.tail_abs_a + d_alpha * table.tail_abs_q)


def weighted_remainders(table: CoefficientTable, M_d: float, d_alpha: float):
    """``A_n`` and ``B_n`` on the whole table."""
    L = power_lipschitz(_interval_bounds(table, M_d, d_alpha), table.coef.gnum, table.coef.gden)
    w = L * np.abs(1.0 / table.coef.r)
    with np.errstate(invalid="ignore"):
        a_terms = np.where(table.tail_abs_a == 0, 0.0, w * table.tail_abs_a)
        q_terms = np.where(table.tail_abs_q == 0, 0.0, w * table.tail_abs_q)
    return _suffix(a_terms), _suffix(q_terms)


def _suffix(terms: np.ndarray) -> np.ndarray:
    if np.all(np.isfinite(terms)):
        return suffix_sums(terms)
    # an infinite Lipschitz constant poisons every earlier index
    out = suffix_sums(np.where(np.isfinite(terms), terms, 0.0))
    last_inf = int(np.nonzero(~np.isfinite(terms))[0][-1])
    out[: last_inf + 1] = np.inf
    return out


def contraction_theta(eq: EquationSpec, report: HypothesisReport, lips: ContractionReport,
                      window_end: Optional[int] = None) -> ContractionReport:
    """Fill ``c1``, ``c2``, ``θ`` and ``n4``.

    ``n4`` is the first index ``>= n_switch`` from which
    ``sup(|p_n| + L_d A_n) < (1+P)/2`` and ``sup L_α B_n < (1-P)/2``; ``θ``
    is the sup of ``θ_n`` over ``[n4, window_end]``.
    """
    window_end = report.window_end if window_end is None else window_end
    if report.n_switch is None or not report.z3_ok or not lips.L_gamma:
        lips.valid = False
        return lips
    table = _table_for(eq, report, window_end)
    d = report.d
    A, B = weighted_remainders(table, report.M_d, d ** eq.alpha.value)
    s = table.start
    w = window_end - s + 1
    absp = np.abs(table.coef.p[:w])
    first = absp + lips.L_d * A[:w]
    second = lips.L_alpha * B[:w]
    with np.errstate(invalid="ignore"):
        sup1 = np.maximum.accumulate(first[::-1])[::-1]
        sup2 = np.maximum.accumulate(second[::-1])[::-1]
    P = report.P
    idx = np.arange(s, window_end + 1)
    ok = (sup1 < (1 + P) / 2) & (sup2 < (1 - P) / 2) & (idx >= report.n_switch)
    lips.A, lips.B = A, B
    theta_n = first + second
    lips.theta_profile = [[int(n), _finite_or_none(v)] for n, v in zip(idx, theta_n)]
    if not np.any(ok):
        lips.valid = False
        return lips
    i4 = int(np.argmax(ok))
    lips.n4 = int(s + i4)
    lips.c1 = float(sup1[i4])
    lips.c2 = float(sup2[i4])
    lips.theta = float(np.max(theta_n[i4:]))
    lips.theta_literal = _theta_literal(eq, report, lips, table, i4, w)
    lips.valid = bool(lips.theta < 1)
    return lips


def _theta_literal(eq, report, lips, table, i4, w) -> float:
    """``sup |p_n| + L_{γ+} L_d α_n + L_{γ+} L_α β_n`` with the single constant
    ``L_{γ+} = (1/γ+) d^{1/γ+ - 1}``."""
    gp = report.gamma_plus
    L_gp = (1 / gp) * report.d ** (1 / gp - 1)
    alpha_n = suffix_sums(table.outer(table.tail_abs_a))[:w]
    beta_n = suffix_sums(table.outer(table.tail_abs_q))[:w]
    vals = np.abs(table.coef.p[:w]) + L_gp * lips.L_d * alpha_n + L_gp * lips.L_alpha * beta_n
    return float(np.max(vals[i4:]))


def contraction_report(eq: EquationSpec, report: HypothesisReport,
                       window_end: Optional[int] = None) -> ContractionReport:
    lips = lipschitz_constants(eq, report.d, report, window_end)
    return contraction_theta(eq, report, lips, window_end)


def compare_solutions(x: SolutionWindow, y: SolutionWindow, n4: int):
    """``(sup_{n>=n4} |x_n - y_n|, |x - y|)`` over the common window."""
    if x.start != y.start or len(x.values) != len(y.values):
        raise MisalignedWindowsError(
            f"windows [{x.start}, {x.end}] and [{y.start}, {y.end}] are not aligned")
    profile = np.abs(x.values - y.values)
    tail = profile[max(n4 - x.start, 0):]
    return float(np.max(tail, initial=0.0)), profile


@dataclass(frozen=True)
class Ensemble:
    """Finite set of windows sharing one index range; diameters are taken on
    ``[tail_start, tail_end]``."""

    members: tuple
    tail_start: int
    tail_end: Optional[int] = None

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble is empty")
        first = self.members[0]
        for m in self.members[1:]:
            if m.start != first.start or len(m.values) != len(first.values):
                raise MisalignedWindowsError("ensemble members must share start and length")
        object.__setattr__(self, "members", tuple(self.members))

    @property
    def start(self) -> int:
        return self.members[0].start

    @property
    def end(self) -> int:
        return self.members[0].end

    def matrix(self) -> np.ndarray:
        return np.vstack([m.values for m in self.members])

    def diameters(self) -> np.ndarray:
        """Per-index diameter on the tail range."""
        lo = self.tail_start - self.start
        hi = (self.end if self.tail_end is None else self.tail_end) - self.start + 1
        if lo < 0 or hi > len(self.members[0].values) or lo >= hi:
            raise ValueError("tail range outside the members' window")
        M = self.matrix()[:, lo:hi]
        return M.max(axis=0) - M.min(axis=0)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.matrix())))


def mnc_estimate(X: Ensemble) -> float:
    """Largest per-index diameter over the tail range."""
    return float(np.max(X.diameters()))


def random_ensemble(rng: np.random.Generator, start: int, end: int, size: int, d: float,
                    n_switch: int) -> Ensemble:
    vals = rng.uniform(-d, d, size=(size, end - start + 1))
    return Ensemble(tuple(SolutionWindow(start, v, n_switch) for v in vals), start)


@dataclass(frozen=True)
class DarboTrial:
    trial: int
    mu_before: float
    mu_after: float
    ratio: float
    ok: bool


def darbo_ratio_check(X: Ensemble, op: WindowOperator, contraction: ContractionReport,
                      trial: int = 0) -> DarboTrial:
    """Compare ``μ̂(T X)`` on ``[n4, N]`` with ``μ̂(X)`` on ``[n4 - k, N]``.

    The lower end moves back by ``k`` because ``(Tx)_n`` reads ``x_{n-k}``.
    """
    if not contraction.valid:
        raise ValueError("contraction report is not valid")
    n4 = contraction.n4
    d = op.report.d
    images = []
    for m in X.members:
        tx = op(m.values)
        if np.max(np.abs(tx[op.n_switch - op.lo:])) > d * (1 + 1e-12):
            raise LeftBallError(f"T maps an ensemble member outside the ball of radius {d}")
        images.append(SolutionWindow(m.start, tx, op.n_switch))
    before_lo = max(n4 - op.eq.k, X.start)
    mu_before = mnc_estimate(Ensemble(X.members, before_lo, X.tail_end))
    mu_after = mnc_estimate(Ensemble(tuple(images), n4, X.tail_end))
    ratio = 0.0 if mu_before == 0 else mu_after / mu_before
    bound = contraction.c1 + contraction.c2
    ok = mu_after <= bound * mu_before + DARBO_SLACK
    return DarboTrial(trial, mu_before, mu_after, ratio, bool(ok))


def darbo_trials(eq: EquationSpec, report: HypothesisReport, contraction: ContractionReport,
                 N: int, trials: int = 100, members: int = 8, seed: int = 0,
                 op: Optional[WindowOperator] = None) -> list[DarboTrial]:
    op = op or WindowOperator(eq, report, N)
    rng = np.random.default_rng(seed)
    out = []
    for t in range(trials):
        X = random_ensemble(rng, op.lo, op.N, members, report.d, op.n_switch)
        out.append(darbo_ratio_check(X, op, contraction, trial=t))
    return out


def darbo_csv(results: Sequence[DarboTrial]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["trial", "mu_before", "mu_after", "ratio", "ok"])
    for r in results:
        w.writerow([r.trial, repr(r.mu_before), repr(r.mu_after), repr(r.ratio), str(r.ok).lower()])
    return buf.getvalue()


def self_map_trials(op: WindowOperator, samples: int = 200, seed: int = 0) -> float:
    """Largest ``sup_{n>=n_T} |(Tx)_n| / d`` over random ``x`` in ``B``."""
    rng = np.random.default_rng(seed)
    d = op.report.d
    worst = 0.0
    for _ in range(samples):
        x = rng.uniform(-d, d, op.N - op.lo + 1)
        tx = op(x)
        worst = max(worst, float(np.max(np.abs(tx[op.n_switch - op.lo:]))) / d)
    return worst
