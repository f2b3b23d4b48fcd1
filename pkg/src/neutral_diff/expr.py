"""Tokenizer, recursive-descent parser and vectorised evaluator for the
small expression language used in equation configs.

Grammar (see ``docs/grammar.md``)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := atom (('^' | '**') unary)?        # right-associative
    atom    := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

FUNCTIONS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "abs": np.abs,
    "sign": np.sign,
}
CONSTANTS = {"pi": np.pi}


class ExprSyntaxError(ValueError):
    def __init__(self, message: str, text: str, position: int):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position}: {text!r}")


class UnknownIdentifierError(ExprSyntaxError):
    pass


class EvaluationError(ArithmeticError):
    """Raised instead of silently producing nan/inf."""


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    arg: "Node"


Node = Union[Num, Var, Unary, BinOp, Call]

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    stripped_end = len(text.rstrip())
    while pos < stripped_end:
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", text, bad)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: frozenset[str]):
        self.text = text
        self.variables = variables
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, tok, pos = self.take()
        if tok != value:
            found = "end of input" if kind == "end" else repr(tok)
            raise ExprSyntaxError(f"expected {value!r}, found {found}", self.text, pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, tok, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {tok!r}", self.text, pos)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        if self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            return Unary(op, self.unary())
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] in ("^", "**"):
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, tok, pos = self.take()
        if kind == "num":
            return Num(float(tok))
        if kind == "name":
            if tok in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(tok, arg)
            if tok in self.variables:
                return Var(tok)
            if tok in CONSTANTS:
                return Num(float(CONSTANTS[tok]))
            raise UnknownIdentifierError(f"unknown identifier {tok!r}", self.text, pos)
        if tok == "(":
            node = self.expr()
            self.expect(")")
            return node
        found = "end of input" if kind == "end" else repr(tok)
        raise ExprSyntaxError(f"unexpected {found}", self.text, pos)


def parse(text: str, variables=("n",)) -> Node:
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", text or "", 0)
    return _Parser(text, frozenset(variables)).parse()


def _check_finite(values: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        raise EvaluationError(f"non-finite result in {what}")
    return values


def evaluate(node: Node, env: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate ``node`` elementwise; every array in ``env`` shares one shape."""
    with np.errstate(all="ignore"):
        return _eval(node, env)


def _eval(node: Node, env) -> np.ndarray:
    if isinstance(node, Num):
        shape = np.shape(next(iter(env.values()))) if env else ()
        return np.full(shape, node.value, dtype=float)
    if isinstance(node, Var):
        return np.asarray(env[node.name], dtype=float)
    if isinstance(node, Unary):
        val = _eval(node.operand, env)
        return -val if node.op == "-" else val
    if isinstance(node, Call):
        val = _eval(node.arg, env)
        return _check_finite(FUNCTIONS[node.func](val), f"{node.func}()")
    left = _eval(node.left, env)
    right = _eval(node.right, env)
    op = node.op
    if op == "+":
        return _check_finite(left + right, "addition")
    if op == "-":
        return _check_finite(left - right, "subtraction")
    if op == "*":
        return _check_finite(left * right, "multiplication")
    if op == "/":
        if np.any(right == 0):
            raise EvaluationError("division by zero")
        return _check_finite(left / right, "division")
    # power
    if np.any((left == 0) & (right < 0)):
        raise EvaluationError("zero raised to a negative power")
    if np.any((left < 0) & (right != np.round(right))):
        raise EvaluationError(
            "negative base with non-integer exponent; use signed_pow for odd roots"
        )
    return _check_finite(np.power(left, right), "power")


def unparse(node: Node) -> str:
    """Fully parenthesised source text that re-parses to an equal tree."""
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Unary):
        return f"({node.op}{unparse(node.operand)})"
    if isinstance(node, Call):
        return f"{node.func}({unparse(node.arg)})"
    return f"({unparse(node.left)}{node.op}{unparse(node.right)})"


def substitute(node: Node, name: str, replacement: Node) -> Node:
    if isinstance(node, Var):
        return replacement if node.name == name else node
    if isinstance(node, Num):
        return node
    if isinstance(node, Unary):
        return Unary(node.op, substitute(node.operand, name, replacement))
    if isinstance(node, Call):
        return Call(node.func, substitute(node.arg, name, replacement))
    return BinOp(
        node.op,
        substitute(node.left, name, replacement),
        substitute(node.right, name, replacement),
    )


def free_variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Num):
        return set()
    if isinstance(node, (Unary, Call)):
        return free_variables(node.operand if isinstance(node, Unary) else node.arg)
    return free_variables(node.left) | free_variables(node.right)
