"""Small math-expression language: parse, print, evaluate, differentiate.

Grammar (EBNF)::

    expr    = term { ("+" | "-") term } ;
    term    = unary { ("*" | "/") unary } ;
    unary   = "-" unary | power ;
    power   = atom [ "^" unary ] ;          (* exponent must be a constant integer *)
    atom    = number | name | name "(" expr ")" | "(" expr ")" ;
    name    = letter { letter | digit | "_" } ;

Functions: sin, cos, exp, sqrt, abs, sign.  Named constant: pi.
``^`` binds tighter than unary minus, so ``-y2^2`` is ``-(y2^2)``.

Evaluation is vectorised: bindings may be floats or numpy arrays that
broadcast against each other.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np

from .errors import (
    DomainError,
    ExpressionSyntaxError,
    NonDifferentiable,
    UnboundVariable,
    UnknownIdentifier,
)

DEFAULT_VARIABLES = ("x1", "y1", "y2")
FUNCTIONS = ("sin", "cos", "exp", "sqrt", "abs", "sign")
CONSTANTS = {"pi": math.pi}

Number = Union[float, np.ndarray]


class Expr:
    """Base class of the immutable expression tree."""

    __slots__ = ()

    def __call__(self, **bindings):
        return evaluate(self, bindings)

    def __str__(self):
        return to_string(self)

    def free_variables(self) -> frozenset:
        return free_variables(self)


@dataclass(frozen=True, repr=False)
class Const(Expr):
    value: float
    name: str | None = None

    def __repr__(self):
        return f"Const({self.name or self.value!r})"


@dataclass(frozen=True, repr=False)
class Var(Expr):
    name: str

    def __repr__(self):
        return f"Var({self.name})"


@dataclass(frozen=True, repr=False)
class Neg(Expr):
    arg: Expr

    def __repr__(self):
        return f"Neg({self.arg!r})"


@dataclass(frozen=True, repr=False)
class Call(Expr):
    func: str
    arg: Expr

    def __repr__(self):
        return f"Call({self.func}, {self.arg!r})"


@dataclass(frozen=True, repr=False)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    def __repr__(self):
        return f"BinOp({self.op!r}, {self.left!r}, {self.right!r})"


@dataclass(frozen=True, repr=False)
class Pow(Expr):
    base: Expr
    exponent: int

    def __repr__(self):
        return f"Pow({self.base!r}, {self.exponent})"


ZERO = Const(0.0)
ONE = Const(1.0)


# -- tokenizer / parser -------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:"
    r"(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<op>[-+*/^()])"
    r")"
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            start = pos + (len(text[pos:]) - len(text[pos:].lstrip()))
            raise ExpressionSyntaxError(f"unexpected character {text[start]!r}", start)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, variables):
        self.text = text
        self.variables = tuple(variables)
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def advance(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.peek()
        if val != value or kind == "end":
            what = "end of input" if kind == "end" else repr(val)
            raise ExpressionSyntaxError(f"expected {value!r}, found {what}", pos)
        return self.advance()

    def parse(self):
        if self.peek()[0] == "end":
            raise ExpressionSyntaxError("empty expression", 0)
        node = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {val!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.advance()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        if self.peek()[1] == "-" and self.peek()[0] == "op":
            self.advance()
            arg = self.unary()
            # fold a literal so that printed negative constants re-parse equal
            if isinstance(arg, Const) and arg.name is None:
                return Const(-arg.value)
            return Neg(arg)
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek()[1] == "^" and self.peek()[0] == "op":
            _, _, pos = self.advance()
            exp_node = self.unary()
            value = _constant_value(exp_node)
            if value is None or not float(value).is_integer():
                raise ExpressionSyntaxError("exponent must be a constant integer", pos + 1)
            return Pow(base, int(value))
        return base

    def atom(self):
        kind, val, pos = self.peek()
        if kind == "num":
            self.advance()
            return Const(float(val))
        if kind == "name":
            self.advance()
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return Call(val, arg)
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                raise UnknownIdentifier(val, pos)
            if val in CONSTANTS:
                return Const(CONSTANTS[val], val)
            if val in self.variables:
                return Var(val)
            raise UnknownIdentifier(val, pos)
        if val == "(":
            self.advance()
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(val)
        raise ExpressionSyntaxError(f"unexpected {what}", pos)


def _constant_value(node):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Neg):
        inner = _constant_value(node.arg)
        return None if inner is None else -inner
    return None


def parse(text: str, variables: Sequence[str] = DEFAULT_VARIABLES) -> Expr:
    """Parse ``text`` into an expression tree over the given variable names."""
    if not isinstance(text, str):
        raise TypeError("expression text must be a string")
    return _Parser(text, variables).parse()


# -- printing -----------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _prec(node):
    if isinstance(node, BinOp):
        return _PREC[node.op]
    if isinstance(node, Neg):
        return 3
    if isinstance(node, Pow):
        return 4
    if isinstance(node, Const) and node.name is None and node.value < 0:
        return 3
    return 5


def _format_number(value):
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def to_string(node: Expr) -> str:
    """Print with the minimal parentheses needed for a structural round trip."""
    if isinstance(node, Const):
        if node.name:
            return node.name
        if node.value < 0:
            return f"(-{_format_number(-node.value)})"
        return _format_number(node.value)
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Call):
        return f"{node.func}({to_string(node.arg)})"
    if isinstance(node, Neg):
        inner = to_string(node.arg)
        if _prec(node.arg) < 3 or isinstance(node.arg, Neg):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(node, Pow):
        base = to_string(node.base)
        if _prec(node.base) <= 4:
            base = f"({base})"
        exp = str(node.exponent) if node.exponent >= 0 else f"(-{-node.exponent})"
        return f"{base}^{exp}"
    if isinstance(node, BinOp):
        p = _PREC[node.op]
        left = to_string(node.left)
        right = to_string(node.right)
        if _prec(node.left) < p:
            left = f"({left})"
        if _prec(node.right) <= p:
            right = f"({right})"
        return f"{left} {node.op} {right}"
    raise TypeError(f"not an expression node: {node!r}")


# -- evaluation ---------------------------------------------------------------

def free_variables(node: Expr) -> frozenset:
    if isinstance(node, Var):
        return frozenset((node.name,))
    if isinstance(node, Const):
        return frozenset()
    if isinstance(node, (Neg, Call)):
        return free_variables(node.arg)
    if isinstance(node, Pow):
        return free_variables(node.base)
    if isinstance(node, BinOp):
        return free_variables(node.left) | free_variables(node.right)
    raise TypeError(f"not an expression node: {node!r}")


def contains_call(node: Expr, func: str) -> bool:
    if isinstance(node, Call):
        return node.func == func or contains_call(node.arg, func)
    if isinstance(node, Neg):
        return contains_call(node.arg, func)
    if isinstance(node, Pow):
        return contains_call(node.base, func)
    if isinstance(node, BinOp):
        return contains_call(node.left, func) or contains_call(node.right, func)
    return False


def _sqrt(v):
    if np.any(np.asarray(v) < 0):
        raise DomainError("sqrt of a negative number")
    return np.sqrt(v)


def _sign(v):
    if np.any(np.asarray(v) == 0):
        raise DomainError("sign is undefined at 0 (derivative of abs)")
    return np.sign(v)


_FUNCS = {
    "sin": np.sin,
    "cos": np.cos,
    "exp": np.exp,
    "sqrt": _sqrt,
    "abs": np.abs,
    "sign": _sign,
}


def evaluate(node: Expr, bindings: Mapping[str, Number]) -> Number:
    """Evaluate ``node``; floats in give a float out, arrays broadcast."""
    out = _eval(node, bindings)
    if isinstance(out, np.ndarray) and out.ndim == 0:
        return float(out)
    return out


def _eval(node, b):
    if isinstance(node, Const):
        return node.value
    if isinstance(node, Var):
        try:
            return b[node.name]
        except KeyError:
            raise UnboundVariable(node.name) from None
    if isinstance(node, BinOp):
        left = _eval(node.left, b)
        right = _eval(node.right, b)
        if node.op == "+":
            return left + right
        if node.op == "-":
            return left - right
        if node.op == "*":
            return left * right
        if np.any(np.asarray(right) == 0):
            raise DomainError("division by zero")
        return np.divide(left, right)
    if isinstance(node, Neg):
        return -_eval(node.arg, b)
    if isinstance(node, Call):
        with np.errstate(over="raise", invalid="raise"):
            try:
                return _FUNCS[node.func](_eval(node.arg, b))
            except FloatingPointError as exc:
                raise DomainError(f"{node.func}: {exc}") from None
    if isinstance(node, Pow):
        base = _eval(node.base, b)
        if node.exponent < 0:
            if np.any(np.asarray(base) == 0):
                raise DomainError("zero raised to a negative power")
            return 1.0 / np.power(np.asarray(base, dtype=float), -node.exponent)
        if isinstance(base, np.ndarray):
            return np.power(base, node.exponent)
        return float(base) ** node.exponent
    raise TypeError(f"not an expression node: {node!r}")


# -- differentiation ----------------------------------------------------------

def _is_const(node, value=None):
    return isinstance(node, Const) and node.name is None and (
        value is None or node.value == value)


def _add(a, b):
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    return BinOp("+", a, b)


def _sub(a, b):
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if _is_const(a) and _is_const(b):
        return Const(a.value - b.value)
    return BinOp("-", a, b)


def _mul(a, b):
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    return BinOp("*", a, b)


def _div(a, b):
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return BinOp("/", a, b)


def _neg(a):
    if _is_const(a):
        return Const(-a.value) if a.value != 0 else ZERO
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(base, n):
    if n == 0:
        return ONE
    if n == 1:
        return base
    return Pow(base, n)


def differentiate(node: Expr, var: str) -> Expr:
    """Exact symbolic derivative with light constant folding."""
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == var else ZERO
    if isinstance(node, Neg):
        return _neg(differentiate(node.arg, var))
    if isinstance(node, BinOp):
        dl = differentiate(node.left, var)
        dr = differentiate(node.right, var)
        if node.op == "+":
            return _add(dl, dr)
        if node.op == "-":
            return _sub(dl, dr)
        if node.op == "*":
            return _add(_mul(dl, node.right), _mul(node.left, dr))
        # quotient rule
        num = _sub(_mul(dl, node.right), _mul(node.left, dr))
        return _div(num, _pow(node.right, 2))
    if isinstance(node, Pow):
        db = differentiate(node.base, var)
        if _is_const(db, 0.0):
            return ZERO
        n = node.exponent
        return _mul(_mul(Const(float(n)), _pow(node.base, n - 1)), db)
    if isinstance(node, Call):
        u = node.arg
        du = differentiate(u, var)
        if _is_const(du, 0.0):
            return ZERO
        f = node.func
        if f == "sin":
            outer = Call("cos", u)
        elif f == "cos":
            return _neg(_mul(Call("sin", u), du))
        elif f == "exp":
            outer = node
        elif f == "sqrt":
            outer = _div(ONE, _mul(Const(2.0), node))
        elif f == "abs":
            outer = Call("sign", u)
        else:
            raise NonDifferentiable(f"{f} has no classical derivative")
        return _mul(outer, du)
    raise TypeError(f"not an expression node: {node!r}")


def gradient(node: Expr, variables: Sequence[str]) -> tuple:
    return tuple(differentiate(node, v) for v in variables)


# -- periodicity probe --------------------------------------------------------

def check_periodicity(node: Expr, var: str, n_samples: int = 32, *,
                      period: float = 1.0, seed: int = 0,
                      sample_range: tuple = (-1.0, 1.0)) -> bool:
    """Randomised test that ``node`` is ``period``-periodic in ``var``.

    The remaining free variables are drawn uniformly from ``sample_range``.
    """
    if n_samples < 8:
        raise ValueError("n_samples must be at least 8")
    rng = np.random.default_rng(seed)
    others = sorted(free_variables(node) - {var})
    n = n_samples * n_samples
    bindings = {name: rng.uniform(*sample_range, size=n) for name in others}
    t = np.repeat(rng.uniform(0.0, period, size=n_samples), n_samples)
    v0 = np.broadcast_to(evaluate(node, {**bindings, var: t}), t.shape)
    v1 = np.broadcast_to(evaluate(node, {**bindings, var: t + period}), t.shape)
    return bool(np.all(np.abs(v0 - v1) <= 1e-10 * (1.0 + np.abs(v0))))
