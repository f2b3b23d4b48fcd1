"""Hypothesis verification and proof constants for the existence theorem.

The equation is

    Δ( r_n (Δ(x_n + p_n x_{n-k}))^{γ_n} ) + q_n x_n^α + a_n f(x_{n+1}) = 0

and everything here is computed on a finite index window ``[start, W]``,
with infinite tails handled by :func:`~neutral_diff.sequence_model.tail_sum`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize

from . import expr as _expr
from .sequence_model import (
    EvaluationError,
    STOP_RUN,
    GammaSpec,
    OddRational,
    SequenceExpr,
    SeriesTruncationError,
    TailPolicy,
    signed_pow,
    suffix_sums,
    tail_sum,
)

log = logging.getLogger(__name__)

GRID_POINTS = 100_001


class HypothesisViolation(ValueError):
    """A theorem hypothesis fails on the inspected window."""


@dataclass(frozen=True)
class EquationSpec:
    r: SequenceExpr
    p: SequenceExpr
    q: SequenceExpr
    a: SequenceExpr
    gamma: GammaSpec
    alpha: OddRational
    k: int
    f: SequenceExpr
    start: int = 0
    tail_a: TailPolicy = TailPolicy()
    tail_q: TailPolicy = TailPolicy()
    guard: Optional[SequenceExpr] = None
    guard_eps: float = 1e-6
    assume_monotone_tail: bool = False
    name: str = ""

    def __post_init__(self):
        if self.alpha.value < 1:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be a positive integer, got {self.k}")
        if self.start < 0:
            raise ValueError("start must be nonnegative")

    @property
    def x_start(self) -> int:
        """First index at which a solution value is needed."""
        return max(0, self.start - self.k)

    @property
    def first_equation_index(self) -> int:
        return max(self.start, self.x_start + self.k)

    def coefficients(self, lo: int, hi: int) -> "Coefficients":
        """Evaluate every coefficient on ``[lo, hi]`` (inclusive)."""
        if lo < self.start:
            raise ValueError(f"coefficients are only defined from n={self.start}")
        n = np.arange(lo, hi + 1, dtype=float)
        r = self.r.values(n)
        if np.any(r == 0):
            raise ValueError(f"r vanishes at n={int(n[np.argmax(r == 0)])}")
        num, den = self.gamma.at(n)
        return Coefficients(
            lo=lo,
            n=n,
            r=r,
            p=self.p.values(n),
            q=self.q.values(n),
            a=self.a.values(n),
            gnum=num,
            gden=den,
        )

    def f_values(self, x) -> np.ndarray:
        return self.f.values(np.asarray(x, dtype=float))

    def power_alpha(self, x) -> np.ndarray:
        return signed_pow(np.asarray(x, dtype=float), self.alpha)


@dataclass(frozen=True)
class Coefficients:
    lo: int
    n: np.ndarray
    r: np.ndarray
    p: np.ndarray
    q: np.ndarray
    a: np.ndarray
    gnum: np.ndarray
    gden: np.ndarray

    def slice(self, lo: int, hi: int) -> "Coefficients":
        s = slice(lo - self.lo, hi - self.lo + 1)
        return Coefficients(lo, self.n[s], self.r[s], self.p[s], self.q[s], self.a[s],
                            self.gnum[s], self.gden[s])


@dataclass(frozen=True)
class CoefficientTable:
    """Coefficients on ``[start, horizon]`` plus the inner tails
    ``Σ_{i>=n} |a_i|`` and ``Σ_{i>=n} |q_i|`` (upper bounds when certified)."""

    coef: Coefficients
    horizon: int
    tail_abs_a: np.ndarray
    tail_abs_q: np.ndarray
    a_certified: bool
    q_certified: bool
    settled: dict

    @property
    def start(self) -> int:
        return self.coef.lo

    def at(self, arr: np.ndarray, n: int) -> float:
        return float(arr[n - self.start])

    def tail_a_at(self, n: int) -> float:
        """``Σ_{i>=n}|a_i|``; beyond the horizon the tail is treated as 0."""
        if n > self.horizon:
            return 0.0
        return float(self.tail_abs_a[n - self.start])

    def tail_q_at(self, n: int) -> float:
        if n > self.horizon:
            return 0.0
        return float(self.tail_abs_q[n - self.start])

    def gamma_plus_pair(self) -> tuple[int, int]:
        i = int(np.argmax(self.coef.gnum / self.coef.gden))
        return int(self.coef.gnum[i]), int(self.coef.gden[i])

    def outer(self, inner: np.ndarray, exponent_num=None, exponent_den=None) -> np.ndarray:
        """Terms ``[ |1/r_j| * inner_j ]^{den/num}`` on the whole table."""
        base = np.abs(1.0 / self.coef.r) * inner
        num = self.coef.gnum if exponent_num is None else exponent_num
        den = self.coef.gden if exponent_den is None else exponent_den
        return signed_pow(base, (den, num))


def _abs_expr(e: SequenceExpr) -> SequenceExpr:
    return SequenceExpr(_expr.Call("abs", e.ast), f"abs({e.source_text})", e.variables)


def _inner_tails(eq: EquationSpec, coef: Coefficients, horizon: int):
    out = []
    for seq, vals, policy in ((eq.a, coef.a, eq.tail_a), (eq.q, coef.q, eq.tail_q)):
        beyond = tail_sum(_abs_expr(seq), horizon + 1, policy)
        extra = beyond.value + (beyond.error_bound or 0.0)
        out.append((suffix_sums(np.abs(vals)) + extra, beyond.certified))
    return out


def build_table(eq: EquationSpec, window_end: int) -> CoefficientTable:
    """Evaluate the coefficients far enough past ``window_end`` that the
    remainder series have settled (``STOP_RUN`` consecutive terms below
    ``eps_tail``), doubling the horizon up to ``max_terms`` past the window.

    Raises :class:`SeriesTruncationError` when ``Σ|a_i|`` or ``Σ|q_i|`` cannot
    be summed; unsettled outer series are reported in ``settled``.
    """
    start = eq.start
    if window_end < start:
        raise ValueError("window ends before the equation starts")
    eps = min(eq.tail_a.eps_tail, eq.tail_q.eps_tail)
    budget = max(eq.tail_a.max_terms, eq.tail_q.max_terms)
    horizon = max(window_end + 2 * STOP_RUN, start + 64)
    while True:
        coef = eq.coefficients(start, horizon)
        (ta, a_cert), (tq, q_cert) = _inner_tails(eq, coef, horizon)
        table = CoefficientTable(coef, horizon, ta, tq, a_cert, q_cert, {})
        num_plus, den_plus = table.gamma_plus_pair()
        past = slice(window_end + 1 - start, None)

        def small(terms):
            block = terms[past][-STOP_RUN:]
            return bool(block.size == STOP_RUN and np.all(block < eps))

        settled = {
            "a": small(np.abs(coef.a)),
            "q": small(np.abs(coef.q)),
            "alpha": small(table.outer(ta)),
            "beta": small(table.outer(tq)),
            "z2": small(table.outer(ta, num_plus, den_plus)),
            "z22": small(table.outer(tq, num_plus, den_plus)),
        }
        if all(settled.values()) or horizon - window_end >= budget:
            if not all(settled.values()):
                log.warning("series not settled by n=%d: %s", horizon,
                            sorted(k for k, v in settled.items() if not v))
            return CoefficientTable(coef, horizon, ta, tq, a_cert, q_cert, settled)
        horizon = min(start + 2 * (horizon - start), window_end + budget)


class GammaPlus(NamedTuple):
    gamma_plus: float
    ok: bool


def compute_gamma_plus(gamma: GammaSpec, window: tuple[int, int]) -> GammaPlus:
    """Largest ``γ_n`` on the window and whether it is ``<= 1``."""
    lo, hi = window
    num, den = gamma.at(np.arange(lo, hi + 1))
    i = int(np.argmax(num / den))
    # exact comparison in integers
    ok = bool(np.all(num <= den))
    return GammaPlus(float(num[i] / den[i]), ok)


class PBound(NamedTuple):
    P: float
    n1: int


def estimate_P(p: SequenceExpr, window: tuple[int, int]) -> PBound:
    lo, hi = window
    vals = np.abs(p.values(np.arange(lo, hi + 1, dtype=float)))
    tail_max = np.maximum.accumulate(vals[::-1])[::-1]
    ok = np.nonzero(tail_max < 1.0)[0]
    if ok.size == 0:
        raise HypothesisViolation(f"|p_n| does not settle below 1 on [{lo}, {hi}]")
    i = int(ok[0])
    return PBound(float(tail_max[i]), lo + i)


class Remainders(NamedTuple):
    alpha_n: float
    beta_n: float
    alpha_certified: bool
    beta_certified: bool


def remainders(eq: EquationSpec, n: int, table: Optional[CoefficientTable] = None) -> Remainders:
    """``α_n = Σ_{j>=n} [|1/r_j| Σ_{i>=j}|a_i|]^{1/γ_j}`` and ``β_n`` likewise
    with ``q``."""
    if table is None:
        table = build_table(eq, n)
    if n > table.horizon:
        return Remainders(0.0, 0.0, table.a_certified, table.q_certified)
    i = n - table.start
    alpha = suffix_sums(table.outer(table.tail_abs_a)[i:])[0]
    beta = suffix_sums(table.outer(table.tail_abs_q)[i:])[0]
    return Remainders(float(alpha), float(beta), table.a_certified, table.q_certified)


def sup_abs(f: SequenceExpr, d: float, points: int = GRID_POINTS) -> float:
    """``max |f|`` on ``[-d, d]``: dense grid plus golden-section polish."""
    grid = np.linspace(-d, d, points)
    vals = np.abs(f.values(grid))
    i = int(np.argmax(vals))
    best = float(vals[i])
    if 0 < i < points - 1:
        neg = lambda x: -abs(f(x))  # noqa: E731
        try:
            xm = optimize.golden(neg, brack=(grid[i - 1], grid[i], grid[i + 1]), tol=1e-12)
            if -d <= xm <= d:
                best = max(best, abs(f(xm)))
        except (ValueError, RuntimeError):
            pass
    return best


@dataclass
class HypothesisReport:
    gamma_plus: float
    gamma_plus_ok: bool
    P: float
    n1: Optional[int]
    n2: Optional[int]
    n3: Optional[int]
    d: float
    M_d: float
    M_star: float
    C: float
    alpha_rem: list
    beta_rem: list
    z2_ok: bool
    z22_ok: bool
    z3_ok: bool
    add_series_ok: bool
    certified: bool
    self_map_rem: list
    self_map_ok: bool
    n_switch: Optional[int]
    start: int
    k: int
    window_end: int
    horizon: int
    notes: list = field(default_factory=list)
    table: Optional[CoefficientTable] = field(default=None, repr=False, compare=False)

    BOOLEAN_FIELDS = ("gamma_plus_ok", "z2_ok", "z22_ok", "z3_ok", "add_series_ok", "self_map_ok")

    @property
    def hypotheses_ok(self) -> bool:
        return all(getattr(self, name) for name in self.BOOLEAN_FIELDS)

    def alpha_at(self, n: int) -> float:
        return _lookup(self.alpha_rem, n)

    def beta_at(self, n: int) -> float:
        return _lookup(self.beta_rem, n)

    def to_dict(self) -> dict:
        out = {}
        for name in self.__dataclass_fields__:
            if name == "table":
                continue
            out[name] = getattr(self, name)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)


def _lookup(samples: list, n: int) -> float:
    for m, value, _ in samples:
        if m == n:
            return value
    raise KeyError(n)


def choose_constants(eq: EquationSpec, d: float = 1.0, window_end: int = 200) -> HypothesisReport:
    """Check every hypothesis of the existence theorem on ``[start, window_end]``
    and compute the constants of its proof.

    Failures are recorded in the report; only malformed input raises.

    Besides the proof's own ``n3`` the report carries ``n_switch >= n3``,
    the first index from which the rigorous bound
    ``P d + Σ_{j>=n}[|1/r_j| Σ_{i>=j}(M_d|a_i| + d^α|q_i|)]^{1/γ_j} <= d``
    holds, so that the operator really maps the ball of radius ``d`` into
    itself.  The solver switches at ``n_switch``.
    """
    if not d > 0:
        raise ValueError("d must be positive")
    start = eq.start
    window = (start, window_end)
    notes: list[str] = []
    eq.coefficients(start, window_end)  # validates r != 0 and gamma

    gp = compute_gamma_plus(eq.gamma, window)
    try:
        P, n1 = estimate_P(eq.p, window)
        z3_ok = True
    except HypothesisViolation as exc:
        notes.append(str(exc))
        P, n1, z3_ok = float("nan"), None, False

    try:
        table = build_table(eq, window_end)
        add_series_ok = True
    except (SeriesTruncationError, EvaluationError) as exc:
        notes.append(str(exc))
        table = None
        add_series_ok = False

    M_d = sup_abs(eq.f, d)
    d_alpha = d ** eq.alpha.value
    M_star = max(M_d, d_alpha)
    P_eff = P if z3_ok else 0.0
    C = (d - P_eff * d) / (2 * M_star) ** (1 / gp.gamma_plus)

    z2_ok = z22_ok = self_map_ok = False
    alpha_rem: list = []
    beta_rem: list = []
    self_rem: list = []
    n2 = n3 = n_switch = None
    horizon = window_end
    if table is not None:
        horizon = table.horizon
        add_series_ok = table.settled["a"] and table.settled["q"]
        z2_ok = table.settled["z2"] and table.settled["alpha"]
        z22_ok = table.settled["z22"] and table.settled["beta"]
        alpha_arr = suffix_sums(table.outer(table.tail_abs_a))
        beta_arr = suffix_sums(table.outer(table.tail_abs_q))
        w = window_end - start + 1
        ns = range(start, window_end + 1)
        alpha_rem = [[n, float(v), table.a_certified] for n, v in zip(ns, alpha_arr[:w])]
        beta_rem = [[n, float(v), table.q_certified] for n, v in zip(ns, beta_arr[:w])]

        good = ((alpha_arr[:w] <= C) & (beta_arr[:w] <= C)
                & (table.tail_abs_a[:w] <= 1.0) & (table.tail_abs_q[:w] <= 1.0))
        n2 = _first_index_from_which(good, start)
        if n2 is None:
            notes.append(f"remainder thresholds not met on [{start}, {window_end}]")
        elif z3_ok:
            n3 = max(n1, n2)

        rho = suffix_sums(table.outer(M_d * table.tail_abs_a + d_alpha * table.tail_abs_q))
        self_rem = [[n, float(v), table.a_certified and table.q_certified]
                    for n, v in zip(ns, rho[:w])]
        if z3_ok:
            fits = rho[:w] <= (1.0 - P) * d
            fits &= np.arange(start, window_end + 1) >= n1
            n_self = _first_index_from_which(fits, start)
            if n_self is not None and n3 is not None:
                n_switch = _lookback_safe(eq, max(n3, n_self), window_end)
                self_map_ok = n_switch is not None
            if n_self is None:
                notes.append("self-map bound P*d + rho_n <= d not reached on the window")

    certified = (
        add_series_ok
        and table is not None
        and table.a_certified
        and table.q_certified
        and eq.assume_monotone_tail
    )
    report = HypothesisReport(
        gamma_plus=gp.gamma_plus,
        gamma_plus_ok=gp.ok,
        P=P,
        n1=n1,
        n2=n2,
        n3=n3,
        d=float(d),
        M_d=M_d,
        M_star=M_star,
        C=C,
        alpha_rem=alpha_rem,
        beta_rem=beta_rem,
        z2_ok=z2_ok,
        z22_ok=z22_ok,
        z3_ok=z3_ok,
        add_series_ok=add_series_ok,
        certified=False,
        self_map_rem=self_rem,
        self_map_ok=self_map_ok,
        n_switch=n_switch,
        start=start,
        k=eq.k,
        window_end=window_end,
        horizon=horizon,
        notes=notes,
        table=table,
    )
    report.certified = bool(certified and report.hypotheses_ok)
    return report


def _first_index_from_which(mask: np.ndarray, offset: int) -> Optional[int]:
    """Smallest ``n`` such that ``mask`` holds at every index ``>= n``."""
    if mask.size == 0 or not mask[-1]:
        return None
    bad = np.nonzero(~mask)[0]
    return offset + (int(bad[-1]) + 1 if bad.size else 0)


def _lookback_safe(eq: EquationSpec, n: int, window_end: int) -> Optional[int]:
    """Move ``n`` up until ``x_{n-k}`` exists or ``p_n`` is zero there."""
    while n < eq.x_start + eq.k:
        if n > window_end:
            return None
        if eq.p(n) == 0.0:
            break
        n += 1
    return n if n <= window_end else None
