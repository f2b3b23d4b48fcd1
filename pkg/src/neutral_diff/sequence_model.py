"""Real sequences given as expressions in ``n``, odd/odd exponents, signed
powers, and tail sums of series with explicit error control."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence

import numpy as np

from . import expr as _expr
from .expr import EvaluationError, ExprSyntaxError, UnknownIdentifierError

__all__ = [
    "EvaluationError",
    "ExprSyntaxError",
    "UnknownIdentifierError",
    "SequenceExpr",
    "parse_expr",
    "OddRational",
    "GammaSpec",
    "TailPolicy",
    "TailSum",
    "SeriesTruncationError",
    "signed_pow",
    "tail_sum",
    "suffix_sums",
    "power_lipschitz",
]

STOP_RUN = 8  # consecutive small terms required by the heuristic cutoff
_CHUNK = 4096


class SeriesTruncationError(RuntimeError):
    """The stop rule was not met within ``max_terms`` terms."""


@dataclass(frozen=True)
class SequenceExpr:
    ast: _expr.Node
    source_text: str
    variables: tuple[str, ...] = ("n",)

    def evaluate(self, **env) -> np.ndarray:
        if not env:
            env = {v: np.zeros(()) for v in self.variables}
        missing = set(self.variables) - set(env)
        if missing:
            raise TypeError(f"missing values for {sorted(missing)}")
        arrays = {k: np.asarray(v, dtype=float) for k, v in env.items()}
        shape = np.broadcast_shapes(*(a.shape for a in arrays.values()))
        arrays = {k: np.broadcast_to(a, shape) for k, a in arrays.items()}
        return _expr.evaluate(self.ast, arrays)

    def values(self, points) -> np.ndarray:
        """Evaluate a one-variable expression at every entry of ``points``."""
        (var,) = self.variables
        return self.evaluate(**{var: points})

    def __call__(self, point) -> float:
        return float(self.values(np.asarray(point, dtype=float)))

    @property
    def is_constant(self) -> bool:
        return not _expr.free_variables(self.ast)

    def is_zero(self) -> bool:
        return self.is_constant and float(_expr.evaluate(self.ast, {})) == 0.0

    def __str__(self) -> str:
        return self.source_text


def parse_expr(text: str, variables: Sequence[str] = ("n",)) -> SequenceExpr:
    """Parse ``text`` into a :class:`SequenceExpr` over ``variables``.

    >>> parse_expr("2^(-n)")(3)
    0.125
    """
    ast = _expr.parse(text, variables)
    return SequenceExpr(ast, text, tuple(variables))


@dataclass(frozen=True)
class OddRational:
    """Positive rational ``num/den`` with both parts odd."""

    num: int
    den: int = 1

    def __post_init__(self):
        for part in (self.num, self.den):
            if int(part) != part or part < 1 or part % 2 == 0:
                raise ValueError(f"{self.num}/{self.den} is not a ratio of odd positive integers")
        object.__setattr__(self, "num", int(self.num))
        object.__setattr__(self, "den", int(self.den))

    @classmethod
    def parse(cls, text: str) -> "OddRational":
        text = str(text).strip()
        num, _, den = text.partition("/")
        try:
            return cls(int(num), int(den) if den else 1)
        except ValueError as exc:
            raise ValueError(f"cannot read {text!r} as an odd/odd ratio: {exc}") from None

    @property
    def value(self) -> float:
        return self.num / self.den

    def reciprocal(self) -> "OddRational":
        return OddRational(self.den, self.num)

    def as_fraction(self) -> Fraction:
        return Fraction(self.num, self.den)

    def __str__(self) -> str:
        return f"{self.num}/{self.den}"


def signed_pow(t, e) -> np.ndarray | float:
    """``sign(t) * |t|**(num/den)`` for an odd/odd exponent.

    ``e`` is an :class:`OddRational` or a ``(num, den)`` pair whose parts may
    be integer arrays broadcasting against ``t``.
    """
    if isinstance(e, OddRational):
        num, den = e.num, e.den
    else:
        num, den = e
        num_a, den_a = np.asarray(num), np.asarray(den)
        if np.any(num_a % 2 == 0) or np.any(den_a % 2 == 0) or np.any(num_a < 1) or np.any(den_a < 1):
            raise ValueError("signed_pow exponent must be a ratio of odd positive integers")
    t_arr = np.asarray(t, dtype=float)
    if not np.all(np.isfinite(t_arr)):
        raise ValueError("signed_pow is undefined for non-finite input")
    expo = np.asarray(num, dtype=float) / np.asarray(den, dtype=float)
    with np.errstate(over="ignore", under="ignore"):
        out = np.sign(t_arr) * np.power(np.abs(t_arr), expo)
    if not np.all(np.isfinite(out)):
        raise EvaluationError("signed_pow overflowed")
    if out.ndim == 0:
        return float(out)
    return out


@dataclass(frozen=True)
class GammaSpec:
    """Exponent sequence as numerator/denominator integer expressions."""

    num_expr: SequenceExpr
    den_expr: SequenceExpr

    def at(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Return validated integer ``(num, den)`` arrays at ``points``."""
        pts = np.asarray(points, dtype=float)
        num = self.num_expr.values(pts)
        den = self.den_expr.values(pts)
        for name, arr in (("numerator", num), ("denominator", den)):
            if np.any(arr != np.round(arr)) or np.any(arr > 2**53):
                raise ValueError(f"gamma {name} is not integer-valued on the window")
            bad = (arr < 1) | (np.mod(arr, 2) == 0)
            if np.any(bad):
                where = pts[np.argmax(bad)] if pts.ndim else pts
                raise ValueError(
                    f"gamma {name} is not a positive odd integer at n={int(where)}"
                )
        return num.astype(np.int64), den.astype(np.int64)

    def values(self, points) -> np.ndarray:
        num, den = self.at(points)
        return num / den


@dataclass(frozen=True)
class TailPolicy:
    """How an infinite tail is truncated.

    ``mode="majorant"`` needs ``majorant`` (with ``|term| <= majorant``) and
    ``majorant_tail(n) >= sum_{i>=n} majorant(i)`` in closed form; the error
    bound is then rigorous.  ``mode="heuristic"`` stops after ``STOP_RUN``
    consecutive terms below ``eps_tail`` and reports no bound.
    """

    mode: str = "heuristic"
    eps_tail: float = 1e-15
    max_terms: int = 200_000
    majorant: Optional[SequenceExpr] = None
    majorant_tail: Optional[SequenceExpr] = None

    def __post_init__(self):
        if self.mode not in ("heuristic", "majorant"):
            raise ValueError(f"unknown tail mode {self.mode!r}")
        if not self.eps_tail > 0:
            raise ValueError("eps_tail must be positive")
        if self.max_terms < 1:
            raise ValueError("max_terms must be positive")
        if self.mode == "majorant" and (self.majorant is None or self.majorant_tail is None):
            raise ValueError("majorant mode needs both majorant and majorant_tail")

    @property
    def certifying(self) -> bool:
        return self.mode == "majorant"


class TailSum(NamedTuple):
    value: float
    error_bound: Optional[float]  # None means uncertified
    n_terms: int

    @property
    def certified(self) -> bool:
        return self.error_bound is not None


def _terms(term, lo: int, hi: int) -> np.ndarray:
    idx = np.arange(lo, hi, dtype=float)
    if callable(term) and not isinstance(term, SequenceExpr):
        return np.asarray(term(idx), dtype=float)
    return term.values(idx)


def tail_sum(term, start: int, policy: TailPolicy = TailPolicy()) -> TailSum:
    """Approximate ``sum_{i >= start} term(i)``.

    ``term`` is a :class:`SequenceExpr` or a vectorised callable of an index
    array.
    """
    if isinstance(term, SequenceExpr) and term.is_constant:
        if term.is_zero():
            return TailSum(0.0, 0.0, 0)
        raise SeriesTruncationError("constant nonzero series diverges")

    pieces: list[float] = []
    lo = start
    limit = start + policy.max_terms
    if policy.mode == "majorant":
        while lo < limit:
            hi = min(lo + _CHUNK, limit)
            idx = np.arange(lo, hi, dtype=float)
            tails = policy.majorant_tail.values(idx)
            done = np.nonzero(tails < policy.eps_tail)[0]
            stop = hi if done.size == 0 else lo + int(done[0])
            if stop > lo:
                vals = _terms(term, lo, stop)
                bound = policy.majorant.values(np.arange(lo, stop, dtype=float))
                if np.any(np.abs(vals) > bound * (1 + 1e-12) + 1e-300):
                    bad = lo + int(np.argmax(np.abs(vals) > bound * (1 + 1e-12)))
                    raise ValueError(f"majorant violated at i={bad}")
                pieces.extend(vals.tolist())
            if done.size:
                return TailSum(math.fsum(pieces), float(tails[done[0]]), stop - start)
            lo = hi
        raise SeriesTruncationError(
            f"majorant tail did not drop below {policy.eps_tail} within {policy.max_terms} terms"
        )

    run = 0
    while lo < limit:
        hi = min(lo + _CHUNK, limit)
        vals = _terms(term, lo, hi)
        small = np.abs(vals) < policy.eps_tail
        for offset, is_small in enumerate(small):
            run = run + 1 if is_small else 0
            if run == STOP_RUN:
                pieces.extend(vals[: offset + 1].tolist())
                return TailSum(math.fsum(pieces), None, lo + offset + 1 - start)
        pieces.extend(vals.tolist())
        lo = hi
    raise SeriesTruncationError(
        f"terms did not stay below {policy.eps_tail} for {STOP_RUN} consecutive "
        f"indices within {policy.max_terms} terms"
    )


def suffix_sums(values) -> np.ndarray:
    """``out[i] = sum(values[i:])`` with Neumaier compensation, summed from
    the far end so the result is reproducible bit for bit."""
    vals = np.asarray(values, dtype=float).tolist()
    out = [0.0] * len(vals)
    s = 0.0
    comp = 0.0
    for i in range(len(vals) - 1, -1, -1):
        v = vals[i]
        t = s + v
        if abs(s) >= abs(v):
            comp += (s - t) + v
        else:
            comp += (v - t) + s
        s = t
        out[i] = s + comp
    return np.asarray(out)


def power_lipschitz(c, num, den) -> np.ndarray:
    """Lipschitz constant of ``t -> t^{den/num}`` on ``[-c, c]``.

    For ``den/num >= 1`` this is ``(den/num) c^{den/num - 1}``; below 1 the
    map is not Lipschitz at 0 and ``inf`` is returned.
    """
    e = np.asarray(den, dtype=float) / np.asarray(num, dtype=float)
    c = np.abs(np.asarray(c, dtype=float))
    with np.errstate(over="ignore", under="ignore", divide="ignore"):
        out = np.where(e == 1.0, 1.0, e * np.power(c, e - 1.0))
    return np.where(e < 1.0, np.inf, out)
