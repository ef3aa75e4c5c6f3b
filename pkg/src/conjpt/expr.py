"""Scalar math expressions: parsing, symbolic differentiation, evaluation.

Expressions are immutable trees over an indexed variable list.  The node set
(constants, variables, + - * /, integer powers, unary minus, sin, cos, exp,
log) is closed under differentiation, so derivatives of any order stay
representable.  Simplification is conservative and value-preserving: identity
rules only (0*x -> 0, x+0 -> x, x^0 -> 1, constant folding), no factoring.

Trees are frozen dataclasses and safe to share across threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

__all__ = [
    "ExprNode",
    "ExprError",
    "ExprSyntaxError",
    "ExprDomainError",
    "parse",
    "differentiate",
    "derivative",
    "evaluate",
    "to_string",
    "constant",
    "variable",
    "add",
    "sub",
    "mul",
    "div",
    "powi",
    "neg",
    "sin",
    "cos",
    "exp",
    "log",
]

_FUNCTIONS = ("sin", "cos", "exp", "log")


class ExprError(ValueError):
    """Base class for expression failures."""


class ExprSyntaxError(ExprError):
    """Malformed input text; ``offset`` is the byte position of the failure."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (offset {offset})")
        self.offset = offset


class ExprDomainError(ExprError):
    """Evaluation left the real domain (log of a non-positive value, division by zero)."""


@dataclass(frozen=True, slots=True)
class ExprNode:
    """One node of an expression tree.

    ``kind`` is one of: const, var, add, sub, mul, div, pow, neg, sin, cos,
    exp, log.  ``value`` is used by const nodes, ``index`` by var nodes and
    ``exponent`` (a literal integer >= 0) by pow nodes.
    """

    kind: str
    children: tuple["ExprNode", ...] = ()
    value: float = 0.0
    index: int = 0
    exponent: int = 0

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"ExprNode({to_string(self)!r})"


_ZERO = ExprNode("const", value=0.0)
_ONE = ExprNode("const", value=1.0)


def constant(v: float) -> ExprNode:
    return ExprNode("const", value=float(v))


def variable(index: int) -> ExprNode:
    if index < 0:
        raise ValueError("variable index must be non-negative")
    return ExprNode("var", index=index)


def _is_const(e: ExprNode, v: float | None = None) -> bool:
    return e.kind == "const" and (v is None or e.value == v)


def add(a: ExprNode, b: ExprNode) -> ExprNode:
    if _is_const(a) and _is_const(b):
        return constant(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return ExprNode("add", (a, b))


def sub(a: ExprNode, b: ExprNode) -> ExprNode:
    if _is_const(a) and _is_const(b):
        return constant(a.value - b.value)
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    return ExprNode("sub", (a, b))


def mul(a: ExprNode, b: ExprNode) -> ExprNode:
    if _is_const(a) and _is_const(b):
        return constant(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return _ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return ExprNode("mul", (a, b))


def div(a: ExprNode, b: ExprNode) -> ExprNode:
    if _is_const(b, 1.0):
        return a
    if _is_const(a, 0.0) and not _is_const(b, 0.0):
        return _ZERO
    if _is_const(a) and _is_const(b) and b.value != 0.0:
        return constant(a.value / b.value)
    return ExprNode("div", (a, b))


def powi(base: ExprNode, exponent: int) -> ExprNode:
    if exponent < 0 or exponent != int(exponent):
        raise ExprError("power exponent must be a literal integer >= 0")
    exponent = int(exponent)
    if exponent == 0:
        return _ONE
    if exponent == 1:
        return base
    if _is_const(base):
        return constant(base.value**exponent)
    return ExprNode("pow", (base,), exponent=exponent)


def neg(a: ExprNode) -> ExprNode:
    if _is_const(a):
        return constant(-a.value)
    if a.kind == "neg":
        return a.children[0]
    return ExprNode("neg", (a,))


def _fold_unary(kind: str, a: ExprNode, fn) -> ExprNode:
    if _is_const(a):
        try:
            return constant(fn(a.value))
        except ValueError:
            pass  # out-of-domain constant: keep the node, error surfaces at evaluate()
    return ExprNode(kind, (a,))


def sin(a: ExprNode) -> ExprNode:
    return _fold_unary("sin", a, math.sin)


def cos(a: ExprNode) -> ExprNode:
    return _fold_unary("cos", a, math.cos)


def exp(a: ExprNode) -> ExprNode:
    return _fold_unary("exp", a, math.exp)


def log(a: ExprNode) -> ExprNode:
    return _fold_unary("log", a, math.log)


# ---------------------------------------------------------------------------
# parsing

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>(?:\d+(?:\.\d*)?|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z_0-9]*\Z")


@dataclass(frozen=True, slots=True)
class _Token:
    kind: str  # num | ident | op | end
    text: str
    offset: int


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            # whitespace-only tail is fine; anything else is an error
            rest = text[pos:]
            stripped = rest.lstrip()
            if not stripped:
                break
            raise ExprSyntaxError(
                f"unexpected character {stripped[0]!r}", pos + (len(rest) - len(stripped))
            )
        if m.lastgroup == "num":
            tokens.append(_Token("num", m.group("num"), m.start("num")))
        elif m.lastgroup == "ident":
            tokens.append(_Token("ident", m.group("ident"), m.start("ident")))
        else:
            tokens.append(_Token("op", m.group("op"), m.start("op")))
        pos = m.end()
    tokens.append(_Token("end", "", len(text)))
    return tokens


_BINARY_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}
_UNARY_PREC = 3  # binds tighter than * and /, looser than ^


class _Parser:
    def __init__(self, text: str, var_names: list[str]):
        self.text = text
        self.tokens = _tokenize(text)
        self.pos = 0
        self.vars = {name: i for i, name in enumerate(var_names)}

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def parse(self) -> ExprNode:
        node = self.parse_binary(1)
        tok = self.peek()
        if tok.kind != "end":
            raise ExprSyntaxError(f"unexpected token {tok.text!r}", tok.offset)
        return node

    def parse_binary(self, min_prec: int) -> ExprNode:
        left = self.parse_unary()
        while True:
            tok = self.peek()
            if tok.kind != "op" or tok.text not in _BINARY_PREC:
                return left
            prec = _BINARY_PREC[tok.text]
            if prec < min_prec:
                return left
            self.advance()
            right = self.parse_binary(prec + 1)  # all binary ops are left-associative
            if tok.text == "+":
                left = add(left, right)
            elif tok.text == "-":
                left = sub(left, right)
            elif tok.text == "*":
                left = mul(left, right)
            else:
                left = div(left, right)

    def parse_unary(self) -> ExprNode:
        tok = self.peek()
        if tok.kind == "op" and tok.text == "-":
            self.advance()
            return neg(self.parse_unary())
        return self.parse_power()

    def parse_power(self) -> ExprNode:
        base = self.parse_atom()
        tok = self.peek()
        if tok.kind == "op" and tok.text == "^":
            self.advance()
            return powi(base, self._parse_exponent())
        return base

    def _parse_exponent(self) -> int:
        tok = self.peek()
        if tok.kind != "num":
            raise ExprSyntaxError("exponent must be a literal non-negative integer", tok.offset)
        value = float(tok.text)
        if value != int(value):
            raise ExprSyntaxError("exponent must be a literal non-negative integer", tok.offset)
        self.advance()
        return int(value)

    def parse_atom(self) -> ExprNode:
        tok = self.advance()
        if tok.kind == "num":
            return constant(float(tok.text))
        if tok.kind == "ident":
            nxt = self.peek()
            if nxt.kind == "op" and nxt.text == "(":
                if tok.text not in _FUNCTIONS:
                    raise ExprSyntaxError(f"unknown function {tok.text!r}", tok.offset)
                self.advance()
                inner = self.parse_binary(1)
                self._expect(")")
                return {"sin": sin, "cos": cos, "exp": exp, "log": log}[tok.text](inner)
            if tok.text not in self.vars:
                raise ExprSyntaxError(f"unknown identifier {tok.text!r}", tok.offset)
            return variable(self.vars[tok.text])
        if tok.kind == "op" and tok.text == "(":
            inner = self.parse_binary(1)
            self._expect(")")
            return inner
        raise ExprSyntaxError("expected a value", tok.offset)

    def _expect(self, op: str) -> None:
        tok = self.advance()
        if tok.kind != "op" or tok.text != op:
            raise ExprSyntaxError(f"expected {op!r}", tok.offset)


def parse(text: str, var_names: list[str] | tuple[str, ...]) -> ExprNode:
    """Parse ``text`` into an expression tree over the named variables.

    Precedence, tightest first: ``^`` (literal integer exponents only),
    unary ``-``, ``*`` ``/``, ``+`` ``-``.  Whitespace is insignificant.
    Raises :class:`ExprSyntaxError` with the byte offset of the failure.
    """
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0)
    names = list(var_names)
    if len(set(names)) != len(names):
        raise ValueError("variable names must be distinct")
    for name in names:
        if not _IDENT_RE.match(name):
            raise ValueError(f"invalid variable name {name!r}")
        if name in _FUNCTIONS:
            raise ValueError(f"variable name {name!r} collides with a function")
    return _Parser(text, names).parse()


# ---------------------------------------------------------------------------
# differentiation

def differentiate(e: ExprNode, var: int) -> ExprNode:
    """Exact symbolic derivative of ``e`` with respect to variable ``var``."""
    kind = e.kind
    if kind == "const":
        return _ZERO
    if kind == "var":
        return _ONE if e.index == var else _ZERO
    if kind == "add":
        return add(differentiate(e.children[0], var), differentiate(e.children[1], var))
    if kind == "sub":
        return sub(differentiate(e.children[0], var), differentiate(e.children[1], var))
    if kind == "mul":
        a, b = e.children
        return add(mul(differentiate(a, var), b), mul(a, differentiate(b, var)))
    if kind == "div":
        a, b = e.children
        num = sub(mul(differentiate(a, var), b), mul(a, differentiate(b, var)))
        return div(num, powi(b, 2))
    if kind == "pow":
        (a,) = e.children
        k = e.exponent
        return mul(mul(constant(k), powi(a, k - 1)), differentiate(a, var))
    if kind == "neg":
        return neg(differentiate(e.children[0], var))
    if kind == "sin":
        (a,) = e.children
        return mul(cos(a), differentiate(a, var))
    if kind == "cos":
        (a,) = e.children
        return neg(mul(sin(a), differentiate(a, var)))
    if kind == "exp":
        (a,) = e.children
        return mul(ExprNode("exp", (a,)), differentiate(a, var))
    if kind == "log":
        (a,) = e.children
        return div(differentiate(a, var), a)
    raise ExprError(f"unknown node kind {kind!r}")


def derivative(e: ExprNode, vars_: tuple[int, ...]) -> ExprNode:
    """Repeated differentiation, one variable index per entry of ``vars_``."""
    for v in vars_:
        e = differentiate(e, v)
    return e


# ---------------------------------------------------------------------------
# evaluation and printing

def evaluate(e: ExprNode, point) -> float:
    """IEEE double evaluation of ``e`` at ``point`` (indexable by variable index).

    Raises :class:`ExprDomainError` for log of a non-positive argument or
    division by zero.  Overflow follows IEEE semantics (inf propagates).
    """
    kind = e.kind
    if kind == "const":
        return e.value
    if kind == "var":
        return float(point[e.index])
    if kind == "add":
        return evaluate(e.children[0], point) + evaluate(e.children[1], point)
    if kind == "sub":
        return evaluate(e.children[0], point) - evaluate(e.children[1], point)
    if kind == "mul":
        return evaluate(e.children[0], point) * evaluate(e.children[1], point)
    if kind == "div":
        denom = evaluate(e.children[1], point)
        if denom == 0.0:
            raise ExprDomainError("division by zero")
        return evaluate(e.children[0], point) / denom
    if kind == "pow":
        # binary exponentiation, matching the tape lowering bit for bit
        base = evaluate(e.children[0], point)
        k = e.exponent
        result = base if (k & 1) else None
        sq = base
        k >>= 1
        while k:
            sq = sq * sq
            if k & 1:
                result = sq if result is None else result * sq
            k >>= 1
        return 1.0 if result is None else result
    if kind == "neg":
        return -evaluate(e.children[0], point)
    if kind == "sin":
        return math.sin(evaluate(e.children[0], point))
    if kind == "cos":
        return math.cos(evaluate(e.children[0], point))
    if kind == "exp":
        arg = evaluate(e.children[0], point)
        try:
            return math.exp(arg)
        except OverflowError:
            return math.inf
    if kind == "log":
        arg = evaluate(e.children[0], point)
        if arg <= 0.0:
            raise ExprDomainError(f"log of non-positive value {arg}")
        return math.log(arg)
    raise ExprError(f"unknown node kind {kind!r}")


_PREC = {"add": 1, "sub": 1, "mul": 2, "div": 2, "neg": 3, "pow": 4}
_ATOM_PREC = 5


def _prec(e: ExprNode) -> int:
    return _PREC.get(e.kind, _ATOM_PREC)


def to_string(e: ExprNode, var_names: list[str] | None = None) -> str:
    """Render ``e`` as parseable text; parse(to_string(e)) evaluates identically."""

    def name(i: int) -> str:
        if var_names is not None:
            return var_names[i]
        return f"x{i + 1}"

    def render(node: ExprNode, parent_prec: int, is_right: bool) -> str:
        kind = node.kind
        if kind == "const":
            v = node.value
            if v >= 0:
                s = repr(v)
            else:
                s = f"({v!r})"
            return s
        if kind == "var":
            return name(node.index)
        if kind in ("add", "sub", "mul", "div"):
            prec = _PREC[kind]
            op = {"add": " + ", "sub": " - ", "mul": "*", "div": "/"}[kind]
            left = render(node.children[0], prec, False)
            right = render(node.children[1], prec + 1, True)
            s = f"{left}{op}{right}"
            if prec < parent_prec:
                return f"({s})"
            return s
        if kind == "neg":
            inner = render(node.children[0], _PREC["neg"], False)
            s = f"-{inner}"
            if _PREC["neg"] < parent_prec:
                return f"({s})"
            return s
        if kind == "pow":
            base = render(node.children[0], _ATOM_PREC, False)
            return f"{base}^{node.exponent}"
        # functions
        inner = render(node.children[0], 0, False)
        return f"{kind}({inner})"

    # a render with parent_prec handles grouping; top level never needs parens
    def render_top(node: ExprNode) -> str:
        return render(node, 0, False)

    return render_top(e)


def max_var_index(e: ExprNode) -> int:
    """Largest variable index used in ``e``, or -1 if none."""
    best = e.index if e.kind == "var" else -1
    for c in e.children:
        best = max(best, max_var_index(c))
    return best
