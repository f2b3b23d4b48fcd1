"""Picard iteration of the operator

    (Tx)_n = x_n                                                  n < n_T
    (Tx)_n = -p_n x_{n-k} - Σ_{j>=n} [ (1/r_j) Σ_{i>=j} (a_i f(x_{i+1}) + q_i x_i^α) ]^{1/γ_j}

on a finite window ``[x_start, N]``, backward extension below the switch
index ``n_T`` and the residual of the difference equation.

On a window the sums are cut at ``N - 1`` so that only ``x_0..x_N`` enter.
A fixed point of the cut operator solves the equation exactly on
``[n_T, N - 2]``; what is lost is the distance to the fixed point of the
infinite operator, which is bounded by ``truncation_budget``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .hypothesis_checker import (
    CoefficientTable,
    EquationSpec,
    HypothesisReport,
    build_table,
)
from .sequence_model import EvaluationError, STOP_RUN, power_lipschitz, signed_pow, suffix_sums

log = logging.getLogger(__name__)

EPS_P = 1e-12
DIVERGENCE_RUN = 5


class WindowTooShortError(ValueError):
    pass


class NonConvergenceError(RuntimeError):
    def __init__(self, message: str, stats: "IterationStats", window: "SolutionWindow"):
        super().__init__(message)
        self.stats = stats
        self.window = window


class DivergenceError(NonConvergenceError):
    pass


@dataclass
class SolutionWindow:
    start: int
    values: np.ndarray
    n_switch: int
    residuals: Optional[np.ndarray] = None
    residual_start: Optional[int] = None
    extension_failures: list = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("solution values must be finite")

    @property
    def end(self) -> int:
        return self.start + len(self.values) - 1

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start, self.end + 1)

    def at(self, n: int) -> float:
        if not self.start <= n <= self.end:
            raise IndexError(f"index {n} outside window [{self.start}, {self.end}]")
        return float(self.values[n - self.start])

    def sup_norm(self, lo: Optional[int] = None, hi: Optional[int] = None) -> float:
        lo = self.start if lo is None else lo
        hi = self.end if hi is None else hi
        return float(np.max(np.abs(self.values[lo - self.start: hi - self.start + 1]), initial=0.0))

    def residual_at(self, n: int) -> Optional[float]:
        if self.residuals is None:
            return None
        i = n - self.residual_start
        if 0 <= i < len(self.residuals) and math.isfinite(self.residuals[i]):
            return float(self.residuals[i])
        return None

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["n", "x", "residual"])
        for n, v in zip(self.indices, self.values):
            res = self.residual_at(int(n))
            writer.writerow([int(n), repr(float(v)), "" if res is None else repr(res)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, path, n_switch: int = 0) -> "SolutionWindow":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValueError(f"{path}: no rows")
        ns = [int(r["n"]) for r in rows]
        if ns != list(range(ns[0], ns[0] + len(ns))):
            gaps = [b for a, b in zip(ns, ns[1:]) if b != a + 1]
            raise ValueError(f"{path}: index range is not contiguous (gap before n={gaps[0]})")
        return cls(ns[0], np.array([float(r["x"]) for r in rows]), n_switch)


@dataclass
class IterationStats:
    iterations: int
    final_delta: float
    per_step_deltas: list
    measured_rate: float
    truncation_budget: float
    certified: bool
    n_switch: int
    N_eff: int

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_delta": self.final_delta,
            "per_step_deltas": list(self.per_step_deltas),
            "measured_rate": self.measured_rate,
            "truncation_budget": self.truncation_budget,
            "certified": self.certified,
            "n_switch": self.n_switch,
            "N_eff": self.N_eff,
        }


def measured_rate(deltas) -> float:
    """Geometric mean of consecutive ratios of the positive deltas."""
    pos = [d for d in deltas if d > 0]
    if len(pos) < 2 or len(pos) < len(deltas) - 1:
        # an exact zero update means the iteration terminated outright
        if len(pos) < 2:
            return 0.0
    return float((pos[-1] / pos[0]) ** (1.0 / (len(pos) - 1)))


class WindowOperator:
    """The cut operator on ``[eq.x_start, N]`` with cached coefficients."""

    def __init__(self, eq: EquationSpec, report: HypothesisReport, N: int):
        if report.n_switch is None:
            raise ValueError("report has no valid switch index; hypotheses failed")
        self.eq = eq
        self.report = report
        self.N = int(N)
        self.lo = eq.x_start
        self.n_switch = int(report.n_switch)
        if self.N < self.n_switch + eq.k:
            raise WindowTooShortError(
                f"window end N={self.N} must be at least n_switch + k = {self.n_switch + eq.k}"
            )
        self.coef = eq.coefficients(eq.start, self.N)
        self._table: Optional[CoefficientTable] = None
        self._budget: Optional[float] = None

    # coefficient access by absolute index
    def _c(self, arr: np.ndarray, lo: int, hi: int) -> np.ndarray:
        return arr[lo - self.eq.start: hi - self.eq.start + 1]

    def tail_terms(self, x: np.ndarray, j_lo: int) -> np.ndarray:
        """``φ_j = [S_j / r_j]^{1/γ_j}`` for ``j`` in ``[j_lo, N-1]``."""
        N = self.N
        if j_lo > N - 1:
            return np.zeros(0)
        xi = x[j_lo - self.lo: N - self.lo]
        xnext = x[j_lo + 1 - self.lo: N + 1 - self.lo]
        c = self.coef
        inner = (self._c(c.a, j_lo, N - 1) * self.eq.f_values(xnext)
                 + self._c(c.q, j_lo, N - 1) * self.eq.power_alpha(xi))
        S = suffix_sums(inner) / self._c(c.r, j_lo, N - 1)
        return signed_pow(S, (self._c(c.gden, j_lo, N - 1), self._c(c.gnum, j_lo, N - 1)))

    def delayed(self, x: np.ndarray, lo: int, hi: int) -> np.ndarray:
        """``p_n x_{n-k}`` on ``[lo, hi]``, zero where ``x_{n-k}`` is absent and ``p_n = 0``."""
        k = self.eq.k
        p = self._c(self.coef.p, lo, hi)
        out = np.zeros(hi - lo + 1)
        for idx, n in enumerate(range(lo, hi + 1)):
            if n - k >= self.lo:
                out[idx] = p[idx] * x[n - k - self.lo]
            elif p[idx] != 0:
                raise WindowTooShortError(f"x_{n - k} is needed at n={n} but lies before the window")
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        nT, N = self.n_switch, self.N
        phi = self.tail_terms(x, nT)
        Z = np.append(suffix_sums(phi), 0.0)  # Z_N = 0
        out = x.copy()
        out[nT - self.lo:] = -self.delayed(x, nT, N) - Z
        return out

    @property
    def table(self) -> CoefficientTable:
        if self._table is None:
            rep_table = self.report.table
            if rep_table is not None and rep_table.horizon >= self.N + STOP_RUN:
                self._table = rep_table
            else:
                self._table = build_table(self.eq, self.N)
        return self._table

    def truncation_budget(self) -> float:
        """Bound on ``sup_n |(T x)_n - (T_N x)_n|`` over the ball ``B``.

        Inner sums lose ``Σ_{i>=N}(M_d|a_i| + d^α|q_i|)``; each kept outer term
        moves by at most its per-index Lipschitz constant times that, and the
        dropped outer terms ``j >= N`` are bounded by the self-map remainder.
        """
        if self._budget is None:
            t = self.table
            rep = self.report
            d_alpha = rep.d ** self.eq.alpha.value
            bound_inner = rep.M_d * t.tail_abs_a + d_alpha * t.tail_abs_q
            abs_inv_r = np.abs(1.0 / t.coef.r)
            c_j = abs_inv_r * bound_inner
            L_j = power_lipschitz(c_j, t.coef.gnum, t.coef.gden)
            nT, N = self.n_switch, self.N
            s = t.start
            lost = rep.M_d * t.tail_a_at(N) + d_alpha * t.tail_q_at(N)
            kept = float(np.sum(L_j[nT - s: N - s] * abs_inv_r[nT - s: N - s])) * lost
            outer = t.outer(bound_inner)
            dropped = float(suffix_sums(outer[N - s:])[0]) if N <= t.horizon else 0.0
            self._budget = kept + dropped
        return self._budget


def apply_T(x: SolutionWindow, eq: EquationSpec, report: HypothesisReport,
            op: Optional[WindowOperator] = None) -> SolutionWindow:
    op = op or WindowOperator(eq, report, x.end)
    if x.start != op.lo or x.end != op.N:
        raise WindowTooShortError(f"window must cover [{op.lo}, {op.N}]")
    return SolutionWindow(x.start, op(x.values), op.n_switch)


def constant_window(eq: EquationSpec, report: HypothesisReport, N: int, value: float) -> SolutionWindow:
    lo = eq.x_start
    return SolutionWindow(lo, np.full(N - lo + 1, float(value)), int(report.n_switch))


def iterate(
    eq: EquationSpec,
    report: HypothesisReport,
    initial: SolutionWindow,
    tol: float = 1e-12,
    max_iter: int = 200,
    op: Optional[WindowOperator] = None,
) -> tuple[SolutionWindow, IterationStats]:
    """Picard iteration ``x <- T x`` until ``sup_{[n_T, N]} |T x - x| < tol``.

    The returned window is the last iterate ``x`` with ``|T x - x| < tol``;
    ``iterations`` counts the updates that were applied to reach it.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    op = op or WindowOperator(eq, report, initial.end)
    if initial.start != op.lo or initial.end != op.N:
        raise WindowTooShortError(f"initial window must cover [{op.lo}, {op.N}]")
    if initial.sup_norm() > report.d * (1 + 1e-15):
        raise ValueError(f"initial guess leaves the ball of radius d={report.d}")
    budget = op.truncation_budget()
    x = initial.values.copy()
    lo_T = op.n_switch - op.lo
    deltas: list[float] = []
    growth = 0
    for it in range(max_iter + 1):
        tx = op(x)
        delta = float(np.max(np.abs(tx[lo_T:] - x[lo_T:]), initial=0.0))
        deltas.append(delta)
        stats = IterationStats(it, delta, list(deltas), measured_rate(deltas), budget,
                               budget < tol / 10, op.n_switch, op.N)
        if delta < tol:
            return SolutionWindow(op.lo, x, op.n_switch), stats
        if len(deltas) > 1 and delta > deltas[-2]:
            growth += 1
            if growth >= DIVERGENCE_RUN:
                raise DivergenceError(
                    f"update grew {DIVERGENCE_RUN} consecutive steps", stats,
                    SolutionWindow(op.lo, x, op.n_switch))
        else:
            growth = 0
        x = tx
    raise NonConvergenceError(
        f"no convergence to tol={tol} in {max_iter} iterations (last delta {delta:.3e})",
        stats, SolutionWindow(op.lo, x, op.n_switch))


def backward_extend(x: SolutionWindow, eq: EquationSpec, eps_p: float = EPS_P,
                    op: Optional[WindowOperator] = None) -> SolutionWindow:
    """Fill indices below ``n_T`` from the fixed-point relation

        x_n + p_n x_{n-k} = -Σ_{j>=n} φ_j(x),

    solved for ``x_{n-k}`` for ``n = n_T - 1`` down to the first equation
    index.  Where ``p_n = 0`` and ``q_n = 0`` the relation gives ``x_n``
    directly.  Indices where neither works are listed in
    ``extension_failures`` and left unchanged.
    """
    n_T = x.n_switch
    first = eq.first_equation_index
    if n_T <= first:
        return replace(x, values=x.values.copy(), extension_failures=[])
    N = x.end
    lo = x.start
    if lo != eq.x_start:
        raise WindowTooShortError(f"window must start at {eq.x_start}")
    coef = eq.coefficients(eq.start, N)
    off = eq.start
    vals = x.values.copy()
    k = eq.k
    # running sums from the already-fixed part j >= n_T
    inner_from = [0.0, 0.0]  # (sum, compensation)
    op = op or WindowOperator(eq, _SwitchOnly(n_T), N)
    phi_tail = op.tail_terms(vals, n_T)
    Z = float(suffix_sums(phi_tail)[0]) if phi_tail.size else 0.0
    xi = vals[n_T - lo: N - lo]
    xnext = vals[n_T + 1 - lo: N + 1 - lo]
    inner_tail = coef.a[n_T - off: N - off] * eq.f_values(xnext) + coef.q[n_T - off: N - off] * eq.power_alpha(xi)
    inner_from[0] = float(suffix_sums(inner_tail)[0]) if inner_tail.size else 0.0
    determined = set(range(n_T, N + 1))
    failures = []
    for n in range(n_T - 1, first - 1, -1):
        i = n - off
        try:
            inner_n = coef.a[i] * float(eq.f_values(vals[n + 1 - lo])) + coef.q[i] * float(eq.power_alpha(vals[n - lo]))
            s_new = _kahan_add(inner_from, inner_n)
            phi_n = signed_pow(s_new / coef.r[i], (int(coef.gden[i]), int(coef.gnum[i])))
        except (EvaluationError, ValueError) as exc:
            failures.append({"n": n, "reason": f"non-finite tail term: {exc}"})
            break
        Z = Z + phi_n
        p_n = coef.p[i]
        if abs(p_n) >= eps_p:
            new = (-vals[n - lo] - Z) / p_n
            if not math.isfinite(new):
                failures.append({"n": n, "reason": "extended value overflowed"})
                break
            vals[n - k - lo] = new
            determined.add(n - k)
        elif p_n == 0 and coef.q[i] == 0 and n not in determined:
            vals[n - lo] = -Z
            determined.add(n)
        else:
            failures.append({"n": n, "reason": f"|p_n| = {abs(p_n):.3e} below {eps_p:g}"})
    if failures:
        log.warning("backward extension incomplete at %s", [f["n"] for f in failures])
    return SolutionWindow(lo, vals, n_T, extension_failures=failures)


class _SwitchOnly:
    """Stand-in report carrying only a switch index."""

    def __init__(self, n_switch: int):
        self.n_switch = n_switch
        self.table = None


def _kahan_add(acc: list, value: float) -> float:
    s, comp = acc
    t = s + value
    if abs(s) >= abs(value):
        comp += (s - t) + value
    else:
        comp += (value - t) + s
    acc[0], acc[1] = t, comp
    return t + comp


def _spow(t: np.ndarray, num, den) -> np.ndarray:
    """Signed power that lets overflow through as ``inf``."""
    with np.errstate(over="ignore", invalid="ignore"):
        return np.sign(t) * np.power(np.abs(t), np.asarray(num, float) / np.asarray(den, float))


def _residual_parts(x: SolutionWindow, eq: EquationSpec, lo: int, hi: int):
    """The four terms ``r_{n+1}w_{n+1}``, ``r_n w_n``, ``q_n x_n^α``, ``a_n f(x_{n+1})``
    for every ``n`` in ``[lo, hi]``; overflowing entries come back non-finite."""
    k = eq.k
    if lo - k < x.start and not _p_zero_where_needed(eq, x.start, lo, hi):
        raise IndexError(f"residual at n={lo} needs x_{lo - k}, window starts at {x.start}")
    if hi + 2 > x.end or lo < eq.start or lo > hi:
        raise IndexError(f"residual range [{lo}, {hi}] not covered by window [{x.start}, {x.end}]")
    coef = eq.coefficients(lo, hi + 2)
    n = np.arange(lo, hi + 3)
    xv = x.values[lo - x.start: hi + 3 - x.start]
    lag = np.array([x.values[m - k - x.start] if m - k >= x.start else 0.0 for m in n])
    with np.errstate(over="ignore", invalid="ignore"):
        z = xv + coef.p * lag
        dz = np.diff(z)  # Δz_m for m in [lo, hi+1]
        rw = coef.r[:-1] * _spow(dz, coef.gnum[:-1], coef.gden[:-1])
        q_term = coef.q[:-2] * _spow(xv[:-2], eq.alpha.num, eq.alpha.den)
        a_term = coef.a[:-2] * eq.f_values(xv[1:-1])
    return rw[1:], rw[:-1], q_term, a_term


def _p_zero_where_needed(eq, x_start, lo, hi) -> bool:
    idx = [m for m in range(lo, hi + 3) if m - eq.k < x_start]
    return all(eq.p(m) == 0.0 for m in idx)


def residual(x: SolutionWindow, eq: EquationSpec, n: int) -> float:
    """Left-hand side of the equation at ``n``; zero for an exact solution."""
    value = float(residuals(x, eq, n, n)[0])
    if not math.isfinite(value):
        raise EvaluationError(f"residual at n={n} overflows")
    return value


def residuals(x: SolutionWindow, eq: EquationSpec, lo: int, hi: int) -> np.ndarray:
    """Residuals on ``[lo, hi]``, ``nan`` where the terms overflow."""
    up, down, q_term, a_term = _residual_parts(x, eq, lo, hi)
    with np.errstate(invalid="ignore"):
        res = (up - down) + q_term + a_term
    res[~np.isfinite(res)] = np.nan
    return res


def relative_residuals(x: SolutionWindow, eq: EquationSpec, lo: int, hi: int) -> np.ndarray:
    """Residuals divided by the largest magnitude among the four terms."""
    up, down, q_term, a_term = _residual_parts(x, eq, lo, hi)
    with np.errstate(invalid="ignore", over="ignore"):
        res = (up - down) + q_term + a_term
        scale = np.max(np.abs(np.vstack([up, down, q_term, a_term])), axis=0)
        out = np.abs(res) / np.maximum(scale, np.finfo(float).tiny)
    out[~np.isfinite(out)] = np.nan
    return out


def residual_range(x: SolutionWindow, eq: EquationSpec) -> tuple[int, int]:
    lo = max(eq.first_equation_index, x.start + eq.k)
    return lo, x.end - 2


def with_residuals(x: SolutionWindow, eq: EquationSpec) -> SolutionWindow:
    lo, hi = residual_range(x, eq)
    return replace(x, residuals=residuals(x, eq, lo, hi), residual_start=lo)


def relation_residuals(x: SolutionWindow, eq: EquationSpec, lo: int, hi: int) -> np.ndarray:
    """``x_n + p_n x_{n-k} + Σ_{j>=n} φ_j(x)`` on ``[lo, hi]`` (cut at ``N-1``)."""
    op = WindowOperator(eq, _SwitchOnly(min(lo, x.n_switch)), x.end)
    phi = op.tail_terms(x.values, lo)
    Z = np.append(suffix_sums(phi), 0.0)
    xs = x.values[lo - x.start: hi - x.start + 1]
    return xs + op.delayed(x.values, lo, hi) + Z[: hi - lo + 1]


def guarded_indices(eq: EquationSpec, lo: int, hi: int) -> np.ndarray:
    """Indices in ``[lo, hi]`` where the guard expression is below ``guard_eps``."""
    if eq.guard is None:
        return np.zeros(0, dtype=int)
    n = np.arange(lo, hi + 1)
    return n[np.abs(eq.guard.values(n.astype(float))) < eq.guard_eps]


def solve(eq: EquationSpec, report: HypothesisReport, N: int, tol: float = 1e-12,
          max_iter: int = 200, initial: float = 0.0) -> tuple[SolutionWindow, IterationStats]:
    """Iterate from a constant window, extend backward, attach residuals."""
    op = WindowOperator(eq, report, N)
    x, stats = iterate(eq, report, constant_window(eq, report, N, initial), tol, max_iter, op)
    x = backward_extend(x, eq, op=op)
    return with_residuals(x, eq), stats
