"""Families in which the nonlinear term carries a parameter sequence,

    Δ(r_n (Δ(x_n + p_n x_{n-k}))^{γ_n}) + q_n x_n + a_n f(x_{n+1}) g(u^m_n) = 0,

solved member by member, with a check that the solutions depend on ``u``
in a Lipschitz way:

    ‖x^s - x^t‖ <= θ₂/(1 - θ₁) ‖u^s - u^t‖.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import expr as _expr
from .analysis import weighted_remainders
from .fixed_point_solver import (
    NonConvergenceError,
    SolutionWindow,
    constant_window,
    iterate,
)
from .hypothesis_checker import EquationSpec, HypothesisReport, build_table, choose_constants, sup_abs
from .sequence_model import SequenceExpr, TailPolicy

log = logging.getLogger(__name__)


class MemberFailure(RuntimeError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"family member {index}: {message}")


@dataclass(frozen=True)
class FamilySpec:
    base: EquationSpec
    g: SequenceExpr  # in u
    params: tuple  # SequenceExpr in n, u^1..u^M
    limit: SequenceExpr  # u^0
    D1: Optional[float] = None
    D2: Optional[float] = None
    d1: float = 1.0
    d2: float = 1.0

    def __post_init__(self):
        if self.base.alpha.num != 1 or self.base.alpha.den != 1:
            raise ValueError(f"parameter families need alpha = 1, got {self.base.alpha}")
        if not self.params:
            raise ValueError("family has no members")
        object.__setattr__(self, "params", tuple(self.params))

    def member(self, u: SequenceExpr, label: str = "") -> EquationSpec:
        """The equation with ``a_n`` replaced by ``a_n g(u_n)``."""
        gu = _expr.substitute(self.g.ast, "u", u.ast)
        a_ast = _expr.BinOp("*", self.base.a.ast, gu)
        a = SequenceExpr(a_ast, f"({self.base.a.source_text})*({self.g.source_text} at u={u.source_text})")
        return replace(self.base, a=a, tail_a=self._scaled_policy(u), name=label or self.base.name)

    def _scaled_policy(self, u: SequenceExpr) -> TailPolicy:
        policy = self.base.tail_a
        if policy.mode != "majorant":
            return policy
        # |a_n g(u_n)| <= G |a_n| with G the largest |g(u_n)| seen on the policy's range
        n = np.arange(self.base.start, self.base.start + policy.max_terms, dtype=float)
        G = float(np.max(np.abs(self.g.values(u.values(n)))))
        scale = _expr.Num(G * (1 + 1e-12))
        return replace(
            policy,
            majorant=SequenceExpr(_expr.BinOp("*", scale, policy.majorant.ast), f"{G}*({policy.majorant})"),
            majorant_tail=SequenceExpr(_expr.BinOp("*", scale, policy.majorant_tail.ast),
                                       f"{G}*({policy.majorant_tail})"),
        )

    def u_values(self, lo: int, hi: int) -> np.ndarray:
        """``u^m_n`` for ``m = 0..M`` (row 0 is the limit) on ``[lo, hi]``."""
        n = np.arange(lo, hi + 1, dtype=float)
        return np.vstack([self.limit.values(n)] + [u.values(n) for u in self.params])


@dataclass(frozen=True)
class GrowthCheck:
    D1_hat: float
    D2_hat: float
    D1_full: float
    D2_full: float
    ok: bool

    def to_dict(self) -> dict:
        return {"D1_hat": self.D1_hat, "D2_hat": self.D2_hat, "D1_full": self.D1_full,
                "D2_full": self.D2_full, "ok": self.ok}


def verify_growth(spec: FamilySpec, d1: Optional[float] = None, d2: Optional[float] = None,
                  samples: int = 10_000, seed: int = 0) -> GrowthCheck:
    """Sampled Lipschitz constants of ``(x, s) -> f(x) g(s)`` on
    ``[-d1, d1] x [-d2, d2]``.

    ``D1_hat`` is the slope in ``s`` at equal ``x``, ``D2_hat`` the slope in
    ``x`` at equal ``s``.  ``D1_full`` and ``D2_full`` let the other variable
    move as well; they grow without bound whenever ``f`` or ``g`` is not
    constant, because a difference in ``x`` cannot be charged to ``|s - t|``.
    """
    if samples < 10_000:
        raise ValueError("verify_growth needs at least 10^4 samples")
    d1 = spec.d1 if d1 is None else d1
    d2 = spec.d2 if d2 is None else d2
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-d1, d1, (2, samples))
    s, t = rng.uniform(-d2, d2, (2, samples))
    fx, fy = spec.base.f_values(x), spec.base.f_values(y)
    gs, gt = spec.g.values(s), spec.g.values(t)
    if not all(np.all(np.isfinite(v)) for v in (fx, fy, gs, gt)):
        raise ValueError("f*g is not finite on the sampled boxes")
    du = np.abs(s - t)
    dx = np.abs(x - y)
    D1_hat = float(np.max(np.abs(fx * (gs - gt)) / du))
    D2_hat = float(np.max(np.abs(gs * (fx - fy)) / dx))
    D1_full = float(np.max(np.abs(fx * gs - fy * gt) / du))
    D2_full = float(np.max(np.abs(fx * gs - fy * gt) / dx))
    ok = (spec.D1 is None or D1_hat <= spec.D1) and (spec.D2 is None or D2_hat <= spec.D2)
    return GrowthCheck(D1_hat, D2_hat, D1_full, D2_full, bool(ok))


@dataclass
class DependenceReport:
    theta1: float
    theta2: float
    n_tail: int
    D1: float
    D2: float
    growth: dict
    pairwise: list  # rows (s, t, x_diff, u_diff, bound, ok)
    limit_check: float
    extrapolated_limit_check: float
    dist_to_limit: list
    monotone: bool
    members: list
    valid: bool
    tol: float
    notes: list = field(default_factory=list)
    solutions: list = field(default_factory=list, repr=False, compare=False)  # x^0, x^1, ..., x^M

    def to_dict(self) -> dict:
        keys = ("theta1", "theta2", "n_tail", "D1", "D2", "growth", "pairwise", "limit_check",
                "extrapolated_limit_check", "dist_to_limit", "monotone", "members", "valid", "tol",
                "notes")
        return {k: getattr(self, k) for k in keys}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False)

    def pairwise_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "t", "x_diff", "u_diff", "bound", "ok"])
        for s, t, xd, ud, b, ok in self.pairwise:
            w.writerow([s, t, repr(xd), repr(ud), repr(b), str(ok).lower()])
        return buf.getvalue()

    @property
    def all_bounds_ok(self) -> bool:
        return all(row[5] for row in self.pairwise)


def _tail_norm(x: np.ndarray, lo: int) -> float:
    return float(np.max(np.abs(x[lo:]), initial=0.0))


def solve_family(spec: FamilySpec, d: float = 1.0, N: int = 200, tol: float = 1e-12,
                 max_iter: int = 200, initial: float = 1.0, window_end: Optional[int] = None,
                 samples: int = 10_000, seed: int = 0) -> DependenceReport:
    """Solve every member and the limit problem from the same initial window.

    All members share one switch index ``n_tail`` (the largest one needed by
    any member), so their frozen heads coincide and differences live on
    ``n >= n_tail`` only; ``‖·‖`` is the sup over that range.
    """
    window_end = N if window_end is None else window_end
    if abs(initial) > d:
        raise ValueError("initial value must lie in the ball of radius d")
    labels = ["u0"] + [f"u{m}" for m in range(1, len(spec.params) + 1)]
    equations = [spec.member(spec.limit, labels[0])] + [
        spec.member(u, labels[m]) for m, u in enumerate(spec.params, start=1)
    ]
    reports: list[HypothesisReport] = []
    for m, eq in enumerate(equations):
        rep = choose_constants(eq, d, window_end)
        if not rep.hypotheses_ok:
            raise MemberFailure(m, "hypotheses fail: " + "; ".join(rep.notes or
                                [k for k in rep.BOOLEAN_FIELDS if not getattr(rep, k)]))
        reports.append(rep)
    n_tail = max(r.n_switch for r in reports)
    reports = [replace(r, n_switch=n_tail) for r in reports]

    growth = verify_growth(spec, d, None, samples, seed)
    D1 = spec.D1 if spec.D1 is not None else growth.D1_hat
    D2 = spec.D2 if spec.D2 is not None else growth.D2_hat
    theta1, theta2 = _family_thetas(spec, reports, d, D1, D2, n_tail, window_end)

    solutions: list[SolutionWindow] = []
    members = []
    for m, (eq, rep) in enumerate(zip(equations, reports)):
        x0 = constant_window(eq, rep, N, initial)
        try:
            x, stats = iterate(eq, rep, x0, tol, max_iter)
        except NonConvergenceError as exc:
            raise MemberFailure(m, str(exc)) from exc
        solutions.append(x)
        members.append({"m": m, "iterations": stats.iterations, "final_delta": stats.final_delta,
                        "measured_rate": stats.measured_rate, "certified": stats.certified})

    lo = n_tail - solutions[0].start
    U = spec.u_values(solutions[0].start, N)
    slack = 10 * tol
    factor = theta2 / (1 - theta1) if theta1 < 1 else float("inf")
    pairwise = []
    M = len(spec.params)
    for s_ in range(1, M + 1):
        for t_ in range(s_ + 1, M + 1):
            xd = _tail_norm(solutions[s_].values - solutions[t_].values, lo)
            ud = float(np.max(np.abs(U[s_] - U[t_])))
            bound = factor * ud + slack
            pairwise.append([s_, t_, xd, ud, bound, bool(xd <= bound)])

    dist = [_tail_norm(solutions[m].values - solutions[0].values, lo) for m in range(1, M + 1)]
    monotone = all(b < a for a, b in zip(dist, dist[1:])) if M > 1 else True
    h = [float(np.max(np.abs(U[m] - U[0]))) for m in range(M + 1)]
    x_lim = _extrapolate(solutions, h)
    extrapolated = _tail_norm(x_lim - solutions[0].values, lo)
    notes = []
    if growth.D1_full > 10 * max(D1, 1e-300) or growth.D2_full > 10 * max(D2, 1e-300):
        notes.append("the growth condition holds only along the diagonal of the sampled boxes")
    return DependenceReport(
        theta1=theta1, theta2=theta2, n_tail=n_tail, D1=D1, D2=D2, growth=growth.to_dict(),
        pairwise=pairwise, limit_check=dist[-1], extrapolated_limit_check=extrapolated,
        dist_to_limit=dist, monotone=bool(monotone), members=members,
        valid=bool(theta1 < 1 and theta2 < 1), tol=tol, notes=notes, solutions=solutions,
    )


def _extrapolate(solutions: Sequence[SolutionWindow], h: Sequence[float]) -> np.ndarray:
    """Linear extrapolation to ``h = 0`` from the last two members, where
    ``h_m = ‖u^m - u^0‖``."""
    xM = solutions[-1].values
    if len(solutions) < 3 or h[-2] == h[-1]:
        return xM
    xP = solutions[-2].values
    return xM - h[-1] * (xP - xM) / (h[-2] - h[-1])


def _family_thetas(spec, reports, d, D1, D2, n_tail, window_end) -> tuple[float, float]:
    """``θ₁ = sup(|p_n| + D2 A_n + B_n)`` and ``θ₂ = sup D1 A_n`` over
    ``n >= n_tail``, with ``A_n, B_n`` built on the base coefficients and
    ``M = sup|f| sup|g(u)|`` bounding the nonlinear term."""
    base = spec.base
    table = build_table(base, window_end)
    s = table.start
    U = spec.u_values(s, window_end)
    G = float(np.max(np.abs(spec.g.values(U.ravel()))))
    M = sup_abs(base.f, d) * G
    A, B = weighted_remainders(table, M, d)
    w = window_end - s + 1
    i = n_tail - s
    absp = np.abs(table.coef.p[:w])
    theta1 = float(np.max((absp + D2 * A[:w] + B[:w])[i:]))
    theta2 = float(np.max((D1 * A[:w])[i:]))
    return theta1, theta2

