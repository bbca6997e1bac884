"""Coefficient expressions: parsing, evaluation and symbolic differentiation.

The language is closed: real literals, variables, ``+ - * / ^``, unary minus
and the functions ``exp log sin cos tanh atan sqrt abs``. ``sign`` exists
only so that ``diff(abs(e))`` stays inside the language; its derivative is
taken to be zero everywhere, and ``sign(0) = 0``.

Expressions are immutable trees built from frozen dataclasses, so they hash,
compare structurally and can be shared between threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

__all__ = [
    "Expr", "Num", "Var", "Neg", "BinOp", "Call",
    "ParseError", "DomainError",
    "FUNCTIONS", "STATE_VARS",
    "parse_expr", "evaluate", "diff", "substitute", "free_vars",
    "to_string", "num", "add", "sub", "mul", "div", "power", "neg", "call",
    "CoefficientSet",
]

STATE_VARS = ("t", "x", "u", "p")
FUNCTIONS = ("exp", "log", "sin", "cos", "tanh", "atan", "sqrt", "abs", "sign")


class ParseError(ValueError):
    """Syntax error or undeclared name in a coefficient string."""

    def __init__(self, message, text, offset):
        super().__init__(f"{message} at column {offset + 1} in {text!r}")
        self.text = text
        self.offset = offset      # 0-based character index
        self.column = offset + 1  # 1-based, as editors count


class DomainError(ArithmeticError):
    """Evaluation left the real domain of an operator."""

    def __init__(self, message, node):
        super().__init__(f"{message} in {to_string(node)}")
        self.node = node


class Expr:
    __slots__ = ()

    def __str__(self):
        return to_string(self)


@dataclass(frozen=True)
class Num(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Call(Expr):
    fn: str
    arg: Expr


# ---------------------------------------------------------------------------
# smart constructors (constant folding + neutral elements only)
# ---------------------------------------------------------------------------

ZERO = Num(0.0)
ONE = Num(1.0)


def num(v):
    return Num(float(v))


def _is(e, v):
    return isinstance(e, Num) and e.value == v


def neg(a):
    if isinstance(a, Num):
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def add(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return BinOp("+", a, b)


def sub(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return BinOp("-", a, b)


def mul(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        return Num(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    return BinOp("*", a, b)


def div(a, b):
    if isinstance(a, Num) and isinstance(b, Num) and b.value != 0.0:
        return Num(a.value / b.value)
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    if _is(b, 1.0):
        return a
    return BinOp("/", a, b)


def power(a, b):
    if isinstance(a, Num) and isinstance(b, Num):
        try:
            v = math.pow(a.value, b.value)
        except (ValueError, OverflowError):
            v = None
        if v is not None and math.isfinite(v):
            return Num(v)
    if _is(b, 1.0):
        return a
    if _is(b, 0.0):
        return ONE
    return BinOp("^", a, b)


_SCALAR_FN = {
    "exp": math.exp, "log": math.log, "sin": math.sin, "cos": math.cos,
    "tanh": math.tanh, "atan": math.atan, "sqrt": math.sqrt, "abs": abs,
    "sign": lambda v: float(np.sign(v)),
}


def call(fn, a):
    if fn not in FUNCTIONS:
        raise ValueError(f"unknown function {fn!r}")
    if isinstance(a, Num):
        try:
            v = _SCALAR_FN[fn](a.value)
        except (ValueError, OverflowError):
            v = None
        if v is not None and math.isfinite(v):
            return Num(float(v))
    return Call(fn, a)


_BUILD = {"+": add, "-": sub, "*": mul, "/": div, "^": power}


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()]))"
)


def _tokenize(text):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        value = m.group(kind)
        start = m.start(kind)
        if value == "**":
            value = "^"
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", None, n))
    return tokens


class _Parser:
    def __init__(self, text, allowed):
        self.text = text
        self.allowed = allowed
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, v, pos = self.take()
        if v != value:
            what = "end of input" if kind == "end" else repr(v)
            raise ParseError(f"expected {value!r}, found {what}", self.text, pos)

    def parse(self):
        e = self.expr()
        kind, v, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {v!r}", self.text, pos)
        return e

    def expr(self):
        e = self.term()
        while self.peek()[1] in ("+", "-"):
            op = self.take()[1]
            e = BinOp(op, e, self.term())
        return e

    def term(self):
        e = self.unary()
        while self.peek()[1] in ("*", "/"):
            op = self.take()[1]
            e = BinOp(op, e, self.unary())
        return e

    def unary(self):
        if self.peek()[1] == "-":
            self.take()
            arg = self.unary()
            # a negated literal is the literal itself
            if isinstance(arg, Num):
                return Num(-arg.value)
            return Neg(arg)
        if self.peek()[1] == "+":
            self.take()
            return self.unary()
        return self.pow()

    def pow(self):
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        kind, v, pos = self.take()
        if kind == "num":
            return Num(float(v))
        if kind == "name":
            if self.peek()[1] == "(":
                if v not in FUNCTIONS:
                    raise ParseError(f"unknown function {v!r}", self.text, pos)
                self.take()
                arg = self.expr()
                self.expect(")")
                return Call(v, arg)
            if v not in self.allowed:
                raise ParseError(f"undeclared variable {v!r}", self.text, pos)
            return Var(v)
        if v == "(":
            e = self.expr()
            self.expect(")")
            return e
        what = "end of input" if kind == "end" else repr(v)
        raise ParseError(f"unexpected {what}", self.text, pos)


def parse_expr(text, allowed_vars=STATE_VARS):
    """Parse ``text`` into an expression tree over ``allowed_vars``.

    >>> parse_expr("u*p + sin(x)")
    BinOp(op='+', left=BinOp(op='*', left=Var(name='u'), right=Var(name='p')), right=Call(fn='sin', arg=Var(name='x')))
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty expression", str(text), 0)
    return _Parser(text, frozenset(allowed_vars)).parse()


# ---------------------------------------------------------------------------
# printing
# ---------------------------------------------------------------------------

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_PREC = 3


def _prec(e):
    if isinstance(e, BinOp):
        return _PREC[e.op]
    if isinstance(e, Neg):
        return _NEG_PREC
    if isinstance(e, Num) and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return 0
    return 5


def to_string(e):
    """Render with the fewest parentheses that still parse back to ``e``."""
    if isinstance(e, Num):
        s = repr(e.value)
        if e.value < 0 or math.copysign(1.0, e.value) < 0:
            return f"({s})"
        return s
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Call):
        return f"{e.fn}({to_string(e.arg)})"
    if isinstance(e, Neg):
        inner = to_string(e.arg)
        if _prec(e.arg) < _NEG_PREC or isinstance(e.arg, Neg):
            inner = f"({inner})"
        return f"-{inner}"
    p = _PREC[e.op]
    left, right = to_string(e.left), to_string(e.right)
    if e.op == "^":
        if _prec(e.left) <= p:
            left = f"({left})"
        if _prec(e.right) < _NEG_PREC:
            right = f"({right})"
    else:
        if _prec(e.left) < p:
            left = f"({left})"
        if _prec(e.right) <= p:
            right = f"({right})"
    return f"{left}{e.op}{right}" if e.op in "*/^" else f"{left} {e.op} {right}"


# ---------------------------------------------------------------------------
# structure
# ---------------------------------------------------------------------------

def free_vars(e):
    if isinstance(e, Var):
        return frozenset((e.name,))
    if isinstance(e, Num):
        return frozenset()
    if isinstance(e, (Neg, Call)):
        return free_vars(e.arg)
    return free_vars(e.left) | free_vars(e.right)


def substitute(e, mapping: Mapping[str, Expr]):
    """Replace variables by expressions, re-simplifying on the way up."""
    if isinstance(e, Var):
        return mapping.get(e.name, e)
    if isinstance(e, Num):
        return e
    if isinstance(e, Neg):
        return neg(substitute(e.arg, mapping))
    if isinstance(e, Call):
        return call(e.fn, substitute(e.arg, mapping))
    return _BUILD[e.op](substitute(e.left, mapping), substitute(e.right, mapping))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _check(cond, message, node):
    if np.any(cond):
        raise DomainError(message, node)


def _eval(e, env):
    if isinstance(e, Num):
        return e.value
    if isinstance(e, Var):
        try:
            return env[e.name]
        except KeyError:
            raise KeyError(f"no binding for variable {e.name!r}") from None
    if isinstance(e, Neg):
        return -_eval(e.arg, env)
    if isinstance(e, Call):
        a = _eval(e.arg, env)
        fn = e.fn
        if fn == "log":
            _check(np.asarray(a) <= 0.0, "log of non-positive value", e)
            return np.log(a)
        if fn == "sqrt":
            _check(np.asarray(a) < 0.0, "sqrt of negative value", e)
            return np.sqrt(a)
        return _NP_FN[fn](a)
    a = _eval(e.left, env)
    b = _eval(e.right, env)
    op = e.op
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        _check(np.asarray(b) == 0.0, "division by zero", e)
        return a / b
    base = np.asarray(a, dtype=np.float64)
    expo = np.asarray(b, dtype=np.float64)
    _check((base < 0.0) & (expo != np.round(expo)), "negative base to non-integer power", e)
    _check((base == 0.0) & (expo < 0.0), "zero to negative power", e)
    with np.errstate(over="ignore"):
        return np.power(base, expo)


_NP_FN = {
    "exp": np.exp, "sin": np.sin, "cos": np.cos, "tanh": np.tanh,
    "atan": np.arctan, "abs": np.abs, "sign": np.sign,
}


def evaluate(e, binding):
    """Evaluate ``e`` under ``binding`` (scalars or broadcastable arrays).

    Scalars in give a Python float out; arrays in give an ndarray shaped by
    broadcasting the bound values (constants are broadcast too).
    """
    with np.errstate(over="ignore", invalid="ignore"):
        out = _eval(e, binding)
    shapes = [np.shape(v) for v in binding.values()]
    shape = np.broadcast_shapes(*shapes) if shapes else ()
    if shape == ():
        return float(out)
    return np.broadcast_to(np.asarray(out, dtype=np.float64), shape).copy()


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def diff(e, var):
    """Symbolic partial derivative of ``e`` with respect to ``var``.

    ``abs`` is differentiated as ``sign`` (so the derivative at 0 is 0).
    """
    if isinstance(e, Num):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Neg):
        return neg(diff(e.arg, var))
    if isinstance(e, Call):
        a = e.arg
        da = diff(a, var)
        if _is(da, 0.0):
            return ZERO
        fn = e.fn
        if fn == "exp":
            outer = e
        elif fn == "log":
            return div(da, a)
        elif fn == "sin":
            outer = call("cos", a)
        elif fn == "cos":
            outer = neg(call("sin", a))
        elif fn == "tanh":
            outer = sub(ONE, power(call("tanh", a), num(2)))
        elif fn == "atan":
            return div(da, add(ONE, power(a, num(2))))
        elif fn == "sqrt":
            return div(da, mul(num(2), e))
        elif fn == "abs":
            outer = call("sign", a)
        else:  # sign
            return ZERO
        return mul(outer, da)
    a, b = e.left, e.right
    op = e.op
    if op in "+-":
        return _BUILD[op](diff(a, var), diff(b, var))
    da, db = diff(a, var), diff(b, var)
    if op == "*":
        return add(mul(da, b), mul(a, db))
    if op == "/":
        if _is(db, 0.0):
            return div(da, b)
        return div(sub(mul(da, b), mul(a, db)), power(b, num(2)))
    # power
    if var not in free_vars(b):
        return mul(mul(b, power(a, sub(b, ONE))), da)
    if var not in free_vars(a):
        return mul(mul(e, call("log", a)), db)
    return mul(e, add(mul(db, call("log", a)), div(mul(b, da), a)))


# ---------------------------------------------------------------------------
# coefficient set
# ---------------------------------------------------------------------------

# (name, function, variables) for every partial the downstream code needs
_PARTIALS = (
    [("f_" + v, "f", (v,)) for v in "txup"]
    + [("g_" + v, "g", (v,)) for v in "txup"]
    + [("sigma_" + v, "sigma", (v,)) for v in "txu"]
    + [(f"{fn}_{a}{b}", fn, (a, b)) for fn in ("f", "g")
       for a, b in (("x", "x"), ("x", "u"), ("x", "p"), ("u", "u"), ("u", "p"), ("p", "p"))]
    + [("sigma_xx", "sigma", ("x", "x")), ("sigma_xu", "sigma", ("x", "u")),
       ("sigma_uu", "sigma", ("u", "u")), ("sigma_tx", "sigma", ("t", "x")),
       ("sigma_tu", "sigma", ("t", "u"))]
    + [("h_x", "h", ("x",)), ("h_xx", "h", ("x", "x"))]
)


@dataclass(frozen=True)
class CoefficientSet:
    """The four FBSDE coefficients and their partial-derivative table.

    ``f``, ``sigma``, ``g`` are expressions in ``(t, x, u, p)``; ``sigma``
    must not mention ``p``. ``h`` is an expression in ``x``.
    Derivative entries are looked up by name, e.g. ``cs["g_xp"]``.
    """

    f: Expr
    sigma: Expr
    g: Expr
    h: Expr
    source: tuple = ()
    table: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if "p" in free_vars(self.sigma):
            raise ValueError("sigma must not depend on p")
        if not free_vars(self.h) <= {"x"}:
            raise ValueError("h must depend on x only")
        parents = {"f": self.f, "g": self.g, "sigma": self.sigma, "h": self.h}
        table = {}
        for name, fn, vs in _PARTIALS:
            d = parents[fn]
            for v in vs:
                d = diff(d, v)
            table[name] = d
        object.__setattr__(self, "table", table)

    @classmethod
    def from_strings(cls, f="0", sigma="1", g="0", h="x"):
        return cls(
            f=parse_expr(f, STATE_VARS),
            sigma=parse_expr(sigma, ("t", "x", "u")),
            g=parse_expr(g, STATE_VARS),
            h=parse_expr(h, ("x",)),
            source=(("f", f), ("sigma", sigma), ("g", g), ("h", h)),
        )

    def __getitem__(self, name):
        if name in ("f", "g", "sigma", "h"):
            return getattr(self, name)
        return self.table[name]

    def eval(self, name, **binding):
        return evaluate(self[name], binding)

    def has_abs(self):
        def walk(e):
            if isinstance(e, Call):
                return e.fn in ("abs", "sign") or walk(e.arg)
            if isinstance(e, Neg):
                return walk(e.arg)
            if isinstance(e, BinOp):
                return walk(e.left) or walk(e.right)
            return False
        return any(walk(getattr(self, n)) for n in ("f", "g", "sigma", "h"))
