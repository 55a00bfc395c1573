"""Scalar arithmetic expressions: parsing, evaluation, symbolic derivatives.

Grammar (ASCII only)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | power
    power   := atom ('^' exponent)?          # right associative
    exponent:= '-' exponent | power
    atom    := number | name | func '(' expr ')' | '(' expr ')'
    func    := abs | exp | ln | sqrt | sin | cos

Precedence is ``^`` > unary ``-`` > ``* /`` > ``+ -``, so ``-x^2`` is
``-(x^2)``.  There is no unary plus.

Evaluation comes in two flavours.  :meth:`Expr.evaluate` walks the tree and
raises :class:`DomainError` at the first offending node.  :func:`compile_exprs`
generates a numpy function for batch work; when it produces a non-finite value
the offending sample is re-run through the checked interpreter so that the
error still carries the node span.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Expr",
    "Const",
    "Var",
    "Unary",
    "Binary",
    "ExprError",
    "ParseError",
    "DomainError",
    "NotDifferentiableError",
    "parse",
    "differentiate",
    "evaluate",
    "compile_exprs",
    "FUNCTIONS",
]

FUNCTIONS = ("abs", "exp", "ln", "sqrt", "sin", "cos")

Span = tuple[int, int]


class ExprError(Exception):
    """Base class for expression errors."""


class ParseError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position


class DomainError(ExprError, ArithmeticError):
    """Raised when an expression is evaluated outside its domain."""

    def __init__(self, message: str, span: Span | None = None, point=None):
        where = f" (span {span[0]}:{span[1]})" if span is not None else ""
        super().__init__(message + where)
        self.span = span
        self.point = point


class NotDifferentiableError(ExprError):
    pass


# --------------------------------------------------------------------------
# Tree
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Expr:
    span: Span = field(default=(0, 0), compare=False, repr=False, kw_only=True)

    def variables(self) -> set[str]:
        out: set[str] = set()
        self._collect(out)
        return out

    def _collect(self, out: set[str]) -> None:
        pass

    def evaluate(self, env: Mapping[str, float]) -> float:
        """Checked scalar evaluation; raises :class:`DomainError`."""
        raise NotImplementedError

    def substitute(self, mapping: Mapping[str, "Expr"]) -> "Expr":
        raise NotImplementedError

    def __str__(self) -> str:
        return to_string(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float = 0.0

    def evaluate(self, env):
        return float(self.value)

    def substitute(self, mapping):
        return self


@dataclass(frozen=True)
class Var(Expr):
    name: str = ""

    def _collect(self, out):
        out.add(self.name)

    def evaluate(self, env):
        try:
            return float(env[self.name])
        except KeyError:
            raise ExprError(f"variable {self.name!r} is not bound") from None

    def substitute(self, mapping):
        return mapping.get(self.name, self)


@dataclass(frozen=True)
class Unary(Expr):
    op: str = "neg"
    arg: Expr = field(default_factory=Const)

    def _collect(self, out):
        self.arg._collect(out)

    def evaluate(self, env):
        a = self.arg.evaluate(env)
        op = self.op
        if op == "neg":
            return -a
        if op == "abs":
            return abs(a)
        if op == "exp":
            try:
                return _finite(math.exp(a), self)
            except OverflowError:
                raise DomainError("exp overflow", self.span) from None
        if op == "ln":
            if not a > 0.0:
                raise DomainError(f"ln of non-positive value {a!r}", self.span)
            return math.log(a)
        if op == "sqrt":
            if a < 0.0:
                raise DomainError(f"sqrt of negative value {a!r}", self.span)
            return math.sqrt(a)
        if op == "sin":
            return _finite(math.sin(a), self)
        if op == "cos":
            return _finite(math.cos(a), self)
        raise ExprError(f"unknown unary op {op!r}")

    def substitute(self, mapping):
        return Unary(op=self.op, arg=self.arg.substitute(mapping), span=self.span)


@dataclass(frozen=True)
class Binary(Expr):
    op: str = "+"
    left: Expr = field(default_factory=Const)
    right: Expr = field(default_factory=Const)

    def _collect(self, out):
        self.left._collect(out)
        self.right._collect(out)

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        op = self.op
        if op == "+":
            r = a + b
        elif op == "-":
            r = a - b
        elif op == "*":
            r = a * b
        elif op == "/":
            if b == 0.0:
                raise DomainError("division by zero", self.span)
            r = a / b
        elif op == "^":
            r = _checked_pow(a, b, self.span)
        else:
            raise ExprError(f"unknown binary op {op!r}")
        return _finite(r, self)

    def substitute(self, mapping):
        return Binary(
            op=self.op,
            left=self.left.substitute(mapping),
            right=self.right.substitute(mapping),
            span=self.span,
        )


def _finite(value: float, node: Expr) -> float:
    if not math.isfinite(value):
        raise DomainError(f"non-finite result {value!r}", node.span)
    return value


def _checked_pow(a: float, b: float, span: Span | None) -> float:
    if a < 0.0 and not float(b).is_integer():
        raise DomainError(f"non-integer power {b!r} of negative base {a!r}", span)
    if a == 0.0 and b < 0.0:
        raise DomainError("zero raised to a negative power", span)
    try:
        return float(a) ** float(b)
    except OverflowError:
        raise DomainError("power overflow", span) from None


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/^()]))"
)


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", n))
    return tokens


class _Parser:
    def __init__(self, text: str, variables: Sequence[str] | None, aliases: Mapping[str, str]):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.variables = None if variables is None else set(variables)
        self.aliases = dict(aliases)

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.peek()
        if val != value or kind != "op":
            raise ParseError(f"expected {value!r}", pos)
        return self.take()

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ParseError(f"unexpected token {val!r}", pos)
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, op, _ = self.take()
            right = self.term()
            left = Binary(op=op, left=left, right=right, span=(left.span[0], right.span[1]))
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, _ = self.take()
            right = self.unary()
            left = Binary(op=op, left=left, right=right, span=(left.span[0], right.span[1]))
        return left

    def unary(self) -> Expr:
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.take()
            arg = self.unary()
            return Unary(op="neg", arg=arg, span=(pos, arg.span[1]))
        return self.power()

    def exponent(self) -> Expr:
        kind, val, pos = self.peek()
        if kind == "op" and val == "-":
            self.take()
            arg = self.exponent()
            return Unary(op="neg", arg=arg, span=(pos, arg.span[1]))
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            exp = self.exponent()
            return Binary(op="^", left=base, right=exp, span=(base.span[0], exp.span[1]))
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(value=float(val), span=(pos, pos + len(val)))
        if kind == "name":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                _, _, close = self.expect(")")
                return Unary(op=val, arg=arg, span=(pos, close + 1))
            name = self.aliases.get(val, val)
            if self.variables is not None and name not in self.variables:
                raise ParseError(f"undeclared variable {val!r}", pos)
            return Var(name=name, span=(pos, pos + len(val)))
        if kind == "op" and val == "(":
            inner = self.expr()
            _, _, close = self.expect(")")
            # keep the inner node but widen its span to cover the parentheses
            return _with_span(inner, (pos, close + 1))
        if kind == "end":
            raise ParseError("unexpected end of input", pos)
        raise ParseError(f"unexpected token {val!r}", pos)


def _with_span(e: Expr, span: Span) -> Expr:
    object.__setattr__(e, "span", span)
    return e


def parse(
    text: str,
    variables: Sequence[str] | None = None,
    aliases: Mapping[str, str] | None = None,
) -> Expr:
    """Parse ``text`` into an :class:`Expr`.

    Parameters
    ----------
    text : str
        Expression source.
    variables : sequence of str, optional
        Declared variable names.  Any other name is rejected with a
        :class:`ParseError`.  ``None`` accepts every name.
    aliases : mapping, optional
        Alternative spellings mapped onto declared names (``u`` -> ``u1``).
    """
    if not text or not text.strip():
        raise ParseError("empty expression", 0)
    return _Parser(text, variables, aliases or {}).parse()


# --------------------------------------------------------------------------
# Printer
# --------------------------------------------------------------------------

_BIN_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}
_NEG_PREC = 3


def _fmt_number(v: float) -> str:
    if float(v).is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(float(v))


def to_string(e: Expr) -> str:
    return _print(e)[0]


def _print(e: Expr) -> tuple[str, int]:
    """Return (text, precedence of the outermost operator)."""
    if isinstance(e, Const):
        s = _fmt_number(e.value)
        if e.value < 0 or s.startswith("-"):
            return f"({s})", 5
        return s, 5
    if isinstance(e, Var):
        return e.name, 5
    if isinstance(e, Unary):
        if e.op == "neg":
            inner, p = _print(e.arg)
            if p < _NEG_PREC:
                inner = f"({inner})"
            return "-" + inner, _NEG_PREC
        inner, _ = _print(e.arg)
        return f"{e.op}({inner})", 5
    if isinstance(e, Binary):
        p = _BIN_PREC[e.op]
        ls, lp = _print(e.left)
        rs, rp = _print(e.right)
        if e.op == "^":
            # right associative; a negated base must be wrapped
            if lp <= p:
                ls = f"({ls})"
            if rp < _NEG_PREC:
                rs = f"({rs})"
            return f"{ls}^{rs}", p
        if lp < p:
            ls = f"({ls})"
        if rp <= p:
            rs = f"({rs})"
        return f"{ls} {e.op} {rs}" if p == 1 else f"{ls}*{rs}" if e.op == "*" else f"{ls}/{rs}", p
    raise TypeError(type(e))


# --------------------------------------------------------------------------
# Symbolic differentiation
# --------------------------------------------------------------------------

ZERO = Const(value=0.0)
ONE = Const(value=1.0)


def _is_const(e: Expr, v: float | None = None) -> bool:
    return isinstance(e, Const) and (v is None or e.value == v)


def _add(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(value=a.value + b.value)
    return Binary(op="+", left=a, right=b)


def _sub(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return _neg(b)
    if _is_const(a) and _is_const(b):
        return Const(value=a.value - b.value)
    return Binary(op="-", left=a, right=b)


def _mul(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if _is_const(a) and _is_const(b):
        return Const(value=a.value * b.value)
    return Binary(op="*", left=a, right=b)


def _div(a: Expr, b: Expr) -> Expr:
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    return Binary(op="/", left=a, right=b)


def _neg(a: Expr) -> Expr:
    if _is_const(a):
        return Const(value=-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary(op="neg", arg=a)


def _pow(a: Expr, b: Expr) -> Expr:
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    return Binary(op="^", left=a, right=b)


def differentiate(e: Expr, var: str) -> Expr:
    """Symbolic partial derivative of ``e`` with respect to ``var``.

    Only light constant folding is done.  ``abs`` is rejected: callers with
    non-smooth candidates must fall back to finite differences or forward
    difference quotients along the flow.
    """
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e.name == var else ZERO
    if isinstance(e, Unary):
        if var not in e.arg.variables():
            return ZERO
        da = differentiate(e.arg, var)
        op, a = e.op, e.arg
        if op == "neg":
            return _neg(da)
        if op == "abs":
            raise NotDifferentiableError(
                "abs() has no symbolic derivative; use the finite-difference "
                "gradient mode or Dini quotients along the flow"
            )
        if op == "exp":
            return _mul(e, da)
        if op == "ln":
            return _div(da, a)
        if op == "sqrt":
            return _div(da, _mul(Const(value=2.0), e))
        if op == "sin":
            return _mul(Unary(op="cos", arg=a), da)
        if op == "cos":
            return _neg(_mul(Unary(op="sin", arg=a), da))
        raise ExprError(f"unknown unary op {op!r}")
    if isinstance(e, Binary):
        a, b = e.left, e.right
        if var not in e.variables():
            return ZERO
        da = differentiate(a, var)
        db = differentiate(b, var)
        op = e.op
        if op == "+":
            return _add(da, db)
        if op == "-":
            return _sub(da, db)
        if op == "*":
            return _add(_mul(da, b), _mul(a, db))
        if op == "/":
            return _div(_sub(_mul(da, b), _mul(a, db)), _pow(b, Const(value=2.0)))
        if op == "^":
            if var not in b.variables():
                # d(a^c) = c a^(c-1) a'
                if _is_const(b):
                    lower = Const(value=b.value - 1.0)
                else:
                    lower = _sub(b, ONE)
                return _mul(_mul(b, _pow(a, lower)), da)
            # general case a^b (b' ln a + b a'/a); needs a > 0
            return _mul(e, _add(_mul(db, Unary(op="ln", arg=a)), _div(_mul(b, da), a)))
        raise ExprError(f"unknown binary op {op!r}")
    raise TypeError(type(e))


# --------------------------------------------------------------------------
# Vectorised compilation
# --------------------------------------------------------------------------


def _np_pow(a, b):
    # float power already yields nan for a negative base with a fractional
    # exponent and inf for 0 ** negative; both are caught after evaluation
    return np.power(a, b)


_NP_FUNCS = {
    "abs": "np.abs",
    "exp": "np.exp",
    "ln": "_ln",
    "sqrt": "_sqrt",
    "sin": "np.sin",
    "cos": "np.cos",
}


def _ln(a):
    a = np.asarray(a, dtype=float)
    return np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), np.nan)


def _sqrt(a):
    a = np.asarray(a, dtype=float)
    return np.where(a >= 0, np.sqrt(np.abs(a)), np.nan)


def _codegen(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(float(e.value))
    if isinstance(e, Var):
        return f"_v[{e.name!r}]"
    if isinstance(e, Unary):
        if e.op == "neg":
            return f"(-{_codegen(e.arg)})"
        return f"{_NP_FUNCS[e.op]}({_codegen(e.arg)})"
    if isinstance(e, Binary):
        a, b = _codegen(e.left), _codegen(e.right)
        if e.op == "^":
            return f"_np_pow({a}, {b})"
        return f"({a} {e.op} {b})"
    raise TypeError(type(e))


def compile_exprs(
    exprs: Sequence[Expr], variables: Sequence[str]
) -> Callable[..., np.ndarray]:
    """Compile expressions into one vectorised function.

    The returned callable takes one array per variable (broadcastable) and
    returns an array of shape ``(len(exprs),) + broadcast_shape``.  Any
    non-finite entry triggers a checked re-evaluation at the first bad sample
    and the resulting :class:`DomainError` is raised with the point attached.
    """
    variables = list(variables)
    bodies = [_codegen(e) for e in exprs]
    src = "def _f(_v):\n    return [" + ", ".join(bodies) + "]\n"
    ns = {"np": np, "_np_pow": _np_pow, "_ln": _ln, "_sqrt": _sqrt}
    exec(compile(src, "<ioslab-expr>", "exec"), ns)
    raw = ns["_f"]
    exprs = list(exprs)

    def fn(*args):
        if len(args) != len(variables):
            raise TypeError(f"expected {len(variables)} arguments, got {len(args)}")
        arrays = np.broadcast_arrays(*[np.asarray(a, dtype=float) for a in args]) if args else []
        shape = arrays[0].shape if arrays else ()
        env = dict(zip(variables, arrays))
        with np.errstate(all="ignore"):
            vals = raw(env)
        out = np.empty((len(exprs),) + shape)
        for k, v in enumerate(vals):
            out[k] = v
        bad = ~np.isfinite(out)
        if bad.any():
            k, *idx = np.argwhere(bad)[0]
            point = {name: float(arr[tuple(idx)]) for name, arr in env.items()}
            try:
                exprs[k].evaluate(point)
            except DomainError as err:
                err.point = point
                raise
            raise DomainError("non-finite result", exprs[k].span, point)
        return out

    fn.variables = tuple(variables)
    fn.source = src
    return fn


def evaluate(e: Expr, env: Mapping[str, float]) -> float:
    """Checked scalar evaluation of ``e`` (see :meth:`Expr.evaluate`)."""
    missing = e.variables() - set(env)
    if missing:
        raise ExprError(f"unbound variables: {sorted(missing)}")
    return e.evaluate(env)
