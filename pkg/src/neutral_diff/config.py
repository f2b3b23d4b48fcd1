"""TOML run configuration and built-in presets."""

from __future__ import annotations

import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .expr import ExprSyntaxError, Num, substitute
from .hypothesis_checker import EquationSpec
from .sequence_model import GammaSpec, OddRational, SequenceExpr, TailPolicy, parse_expr

PRESETS = ("example1", "example2", "sturm-liouville", "zero", "family-linear", "gamma-violation")


class ConfigError(ValueError):
    """Malformed or inconsistent configuration; ``location`` names the key."""

    def __init__(self, message: str, location: str = "", source: str = ""):
        self.location = location
        self.source = source
        where = ":".join(part for part in (source, location) if part)
        super().__init__(f"{where}: {message}" if where else message)


@dataclass(frozen=True)
class SolverConfig:
    d: float = 1.0
    N: int = 200
    window_end: Optional[int] = None
    tol: float = 1e-12
    max_iter: int = 200
    initial: float = 0.0

    @property
    def check_window(self) -> int:
        return self.N if self.window_end is None else self.window_end


@dataclass(frozen=True)
class AnalysisConfig:
    trials: int = 100
    members: int = 8
    seed: int = 20240601


@dataclass(frozen=True)
class FamilyConfig:
    g: SequenceExpr
    params: tuple  # SequenceExpr in n, one per member m = 1..M
    limit: SequenceExpr
    D1: Optional[float] = None
    D2: Optional[float] = None
    d1: float = 1.0
    d2: float = 1.0
    samples: int = 10_000
    initial: float = 1.0


@dataclass(frozen=True)
class RunConfig:
    equation: EquationSpec
    solver: SolverConfig = SolverConfig()
    analysis: AnalysisConfig = AnalysisConfig()
    family: Optional[FamilyConfig] = None
    output_dir: str = "out"
    source: str = ""


def _expr(table: dict, key: str, loc: str, source: str, variables=("n",), default=None) -> SequenceExpr:
    if key not in table:
        if default is None:
            raise ConfigError("missing required key", f"{loc}.{key}", source)
        return parse_expr(default, variables)
    value = table[key]
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        value = repr(value)
    if not isinstance(value, str):
        raise ConfigError(f"expected an expression string, got {type(value).__name__}", f"{loc}.{key}", source)
    try:
        return parse_expr(value, variables)
    except ExprSyntaxError as exc:
        raise ConfigError(str(exc), f"{loc}.{key}", source) from None


def _number(table: dict, key: str, loc: str, source: str, kind, default):
    value = table.get(key, default)
    if value is None:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"expected a number, got {value!r}", f"{loc}.{key}", source)
    if kind is int and int(value) != value:
        raise ConfigError(f"expected an integer, got {value!r}", f"{loc}.{key}", source)
    return kind(value)


def _check_keys(table: dict, allowed: set, loc: str, source: str) -> None:
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) {unknown}", loc, source)


def _tail_policy(table: dict, loc: str, source: str) -> TailPolicy:
    _check_keys(table, {"mode", "eps_tail", "max_terms", "majorant", "majorant_tail"}, loc, source)
    mode = table.get("mode", "heuristic")
    majorant = _expr(table, "majorant", loc, source) if "majorant" in table else None
    majorant_tail = _expr(table, "majorant_tail", loc, source) if "majorant_tail" in table else None
    try:
        return TailPolicy(
            mode=mode,
            eps_tail=_number(table, "eps_tail", loc, source, float, 1e-15),
            max_terms=_number(table, "max_terms", loc, source, int, 200_000),
            majorant=majorant,
            majorant_tail=majorant_tail,
        )
    except ValueError as exc:
        raise ConfigError(str(exc), loc, source) from None


EQUATION_KEYS = {
    "name", "r", "p", "q", "a", "gamma_num", "gamma_den", "alpha", "k", "f", "start",
    "guard", "guard_eps", "assume_monotone_tail",
}


def equation_from_table(table: dict, tails: dict, source: str = "") -> EquationSpec:
    loc = "equation"
    _check_keys(table, EQUATION_KEYS, loc, source)
    try:
        alpha = OddRational.parse(table.get("alpha", "1/1"))
    except ValueError as exc:
        raise ConfigError(str(exc), f"{loc}.alpha", source) from None
    k = _number(table, "k", loc, source, int, None)
    if k is None:
        raise ConfigError("missing required key", f"{loc}.k", source)
    gamma = GammaSpec(
        _expr(table, "gamma_num", loc, source, default="1"),
        _expr(table, "gamma_den", loc, source, default="1"),
    )
    guard = _expr(table, "guard", loc, source) if "guard" in table else None
    try:
        return EquationSpec(
            r=_expr(table, "r", loc, source),
            p=_expr(table, "p", loc, source, default="0"),
            q=_expr(table, "q", loc, source, default="0"),
            a=_expr(table, "a", loc, source, default="0"),
            gamma=gamma,
            alpha=alpha,
            k=k,
            f=_expr(table, "f", loc, source, variables=("x",)),
            start=_number(table, "start", loc, source, int, 0),
            tail_a=_tail_policy(tails.get("a", {}), "tail.a", source),
            tail_q=_tail_policy(tails.get("q", {}), "tail.q", source),
            guard=guard,
            guard_eps=_number(table, "guard_eps", loc, source, float, 1e-6),
            assume_monotone_tail=bool(table.get("assume_monotone_tail", False)),
            name=str(table.get("name", "")),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), loc, source) from None


def _family(table: dict, source: str) -> FamilyConfig:
    loc = "family"
    _check_keys(table, {"g", "params", "param", "members", "limit", "D1", "D2", "d1", "d2",
                        "samples", "initial"}, loc, source)
    g = _expr(table, "g", loc, source, variables=("u",))
    if "params" in table and "param" in table:
        raise ConfigError("give either params or param, not both", loc, source)
    if "params" in table:
        raw = table["params"]
        if not isinstance(raw, list) or not raw or not all(isinstance(s, str) for s in raw):
            raise ConfigError("params must be a non-empty list of expression strings in n "
                              "(literal arrays are not supported)", f"{loc}.params", source)
        params = tuple(_expr({"p": s}, "p", f"{loc}.params[{i}]", source) for i, s in enumerate(raw))
    elif "param" in table:
        members = _number(table, "members", loc, source, int, None)
        if not members or members < 1:
            raise ConfigError("param needs a positive members count", f"{loc}.members", source)
        template = _expr(table, "param", loc, source, variables=("n", "m"))
        params = tuple(
            SequenceExpr(_substitute_m(template, m), f"{template.source_text} [m={m}]", ("n",))
            for m in range(1, members + 1)
        )
    else:
        raise ConfigError("missing params (or param with members)", loc, source)
    return FamilyConfig(
        g=g,
        params=params,
        limit=_expr(table, "limit", loc, source),
        D1=_number(table, "D1", loc, source, float, None),
        D2=_number(table, "D2", loc, source, float, None),
        d1=_number(table, "d1", loc, source, float, 1.0),
        d2=_number(table, "d2", loc, source, float, 1.0),
        samples=_number(table, "samples", loc, source, int, 10_000),
        initial=_number(table, "initial", loc, source, float, 1.0),
    )


def _substitute_m(template: SequenceExpr, m: int):
    return substitute(template.ast, "m", Num(float(m)))


def config_from_dict(data: dict, source: str = "") -> RunConfig:
    _check_keys(data, {"equation", "tail", "solver", "analysis", "family", "output"}, "", source)
    if "equation" not in data:
        raise ConfigError("missing [equation] section", "equation", source)
    tails = data.get("tail", {})
    _check_keys(tails, {"a", "q"}, "tail", source)
    eq = equation_from_table(data["equation"], tails, source)

    s = data.get("solver", {})
    _check_keys(s, {"d", "N", "window_end", "tol", "max_iter", "initial"}, "solver", source)
    solver = SolverConfig(
        d=_number(s, "d", "solver", source, float, 1.0),
        N=_number(s, "N", "solver", source, int, 200),
        window_end=_number(s, "window_end", "solver", source, int, None),
        tol=_number(s, "tol", "solver", source, float, 1e-12),
        max_iter=_number(s, "max_iter", "solver", source, int, 200),
        initial=_number(s, "initial", "solver", source, float, 0.0),
    )
    if not solver.d > 0:
        raise ConfigError("d must be positive", "solver.d", source)
    if not solver.tol > 0:
        raise ConfigError("tol must be positive", "solver.tol", source)

    a = data.get("analysis", {})
    _check_keys(a, {"trials", "members", "seed"}, "analysis", source)
    analysis = AnalysisConfig(
        trials=_number(a, "trials", "analysis", source, int, 100),
        members=_number(a, "members", "analysis", source, int, 8),
        seed=_number(a, "seed", "analysis", source, int, 20240601),
    )
    family = _family(data["family"], source) if "family" in data else None
    out = data.get("output", {})
    _check_keys(out, {"dir"}, "output", source)
    return RunConfig(eq, solver, analysis, family, str(out.get("dir", "out")), source)


def load_config(path) -> RunConfig:
    """Read a TOML file, or a preset when ``path`` names one."""
    text, source = _read(path)
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(exc), "", source) from None
    return config_from_dict(data, source)


def _read(path) -> tuple[str, str]:
    name = str(path)
    if name in PRESETS:
        res = resources.files("neutral_diff") / "presets" / f"{name}.toml"
        return res.read_text(), f"preset:{name}"
    p = Path(name)
    if not p.is_file():
        raise ConfigError(f"no such file or preset (presets: {', '.join(PRESETS)})", "", name)
    return p.read_text(), name


def load_preset(name: str) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return load_config(name)
