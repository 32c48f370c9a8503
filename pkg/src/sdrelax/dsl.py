"""A tiny expression language for energy densities.

Grammar (EBNF)::

    expr   := term (('+' | '-') term)*
    term   := factor (('*' | '/') factor)*
    factor := base ('^' number)?
    base   := number | ident | func '(' expr (',' expr)* ')' | '(' expr ')'

Unary minus is accepted as ``factor := '-' factor``, so ``-x^2`` is
``-(x^2)``.

Identifiers are ``A`` (matrix), ``x``, ``lambda``, ``nu`` (vectors) and
zero-based entry access ``A[i][j]``, ``x[i]``, ``lambda[i]``, ``nu[i]``.
Functions: ``abs norm normsq dot sqrt exp sin cos min max``.

Evaluation is vectorised: every variable may carry leading batch axes, e.g.
``A`` of shape ``(..., d, N)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Union

import numpy as np

__all__ = [
    "DSLError",
    "Num",
    "Var",
    "Call",
    "BinOp",
    "Neg",
    "Pow",
    "parse",
    "to_text",
    "evaluate",
    "variables",
]

VARIABLE_RANK = {"A": 2, "x": 1, "lambda": 1, "nu": 1}
FUNCTION_ARITY = {
    "abs": 1,
    "norm": 1,
    "normsq": 1,
    "dot": 2,
    "sqrt": 1,
    "exp": 1,
    "sin": 1,
    "cos": 1,
    "min": -2,  # variadic, at least two
    "max": -2,
}


class DSLError(ValueError):
    """Syntax or semantic error; ``column`` is 1-based."""

    def __init__(self, message: str, column: int | None = None):
        self.column = column
        if column is not None:
            message = f"{message} at column {column}"
        super().__init__(message)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str
    indices: tuple[int, ...] = ()


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Node", ...]


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Neg:
    operand: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: float


Node = Union[Num, Var, Call, BinOp, Neg, Pow]


# ---------------------------------------------------------------- tokenizer

@dataclass(frozen=True)
class _Token:
    kind: str  # num, ident, op, end
    text: str
    col: int


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        start = i
        if ch.isdigit() or (ch == "." and i + 1 < len(text) and text[i + 1].isdigit()):
            while i < len(text) and (text[i].isdigit() or text[i] == "."):
                i += 1
            if i < len(text) and text[i] in "eE":
                j = i + 1
                if j < len(text) and text[j] in "+-":
                    j += 1
                if j < len(text) and text[j].isdigit():
                    i = j
                    while i < len(text) and text[i].isdigit():
                        i += 1
            tokens.append(_Token("num", text[start:i], start + 1))
        elif ch.isalpha() or ch == "_":
            while i < len(text) and (text[i].isalnum() or text[i] == "_"):
                i += 1
            tokens.append(_Token("ident", text[start:i], start + 1))
        elif ch in "+-*/^(),[]":
            tokens.append(_Token("op", ch, start + 1))
            i += 1
        else:
            raise DSLError(f"unexpected character {ch!r}", start + 1)
    tokens.append(_Token("end", "", len(text) + 1))
    return tokens


# ------------------------------------------------------------------- parser

class _Parser:
    def __init__(self, text: str, allowed: frozenset[str] | None):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.allowed = allowed

    @property
    def tok(self) -> _Token:
        return self.tokens[self.pos]

    def _expect(self, text: str) -> _Token:
        tok = self.tok
        if tok.kind != "op" or tok.text != text:
            found = "end of input" if tok.kind == "end" else repr(tok.text)
            raise DSLError(f"expected {text!r}, found {found}", tok.col)
        self.pos += 1
        return tok

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise DSLError(f"unexpected {self.tok.text!r}", self.tok.col)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.pos += 1
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.pos += 1
            node = BinOp(op, node, self.factor())
        return node

    def factor(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.pos += 1
            return Neg(self.factor())
        node = self.base()
        if self.tok.kind == "op" and self.tok.text == "^":
            self.pos += 1
            sign = 1.0
            if self.tok.kind == "op" and self.tok.text == "-":
                sign = -1.0
                self.pos += 1
            if self.tok.kind != "num":
                raise DSLError("exponent must be a number", self.tok.col)
            node = Pow(node, sign * self._number(self.tok))
            self.pos += 1
        return node

    def _number(self, tok: _Token) -> float:
        try:
            return float(tok.text)
        except ValueError:
            raise DSLError(f"malformed number {tok.text!r}", tok.col) from None

    def base(self) -> Node:
        tok = self.tok
        if tok.kind == "num":
            self.pos += 1
            return Num(self._number(tok))
        if tok.kind == "op" and tok.text == "(":
            self.pos += 1
            node = self.expr()
            self._expect(")")
            return node
        if tok.kind == "ident":
            self.pos += 1
            if tok.text in FUNCTION_ARITY:
                return self._call(tok)
            if tok.text in VARIABLE_RANK:
                if self.allowed is not None and tok.text not in self.allowed:
                    raise DSLError(f"identifier {tok.text!r} not available here", tok.col)
                return self._var(tok)
            raise DSLError(f"unknown identifier {tok.text!r}", tok.col)
        if tok.kind == "end":
            raise DSLError("unexpected end of input", tok.col)
        raise DSLError(f"unexpected {tok.text!r}", tok.col)

    def _call(self, name: _Token) -> Node:
        self._expect("(")
        args = [self.expr()]
        while self.tok.kind == "op" and self.tok.text == ",":
            self.pos += 1
            args.append(self.expr())
        self._expect(")")
        arity = FUNCTION_ARITY[name.text]
        if (arity > 0 and len(args) != arity) or (arity < 0 and len(args) < -arity):
            want = arity if arity > 0 else f"at least {-arity}"
            raise DSLError(
                f"{name.text}() takes {want} argument(s), got {len(args)}", name.col
            )
        return Call(name.text, tuple(args))

    def _var(self, name: _Token) -> Node:
        indices = []
        while self.tok.kind == "op" and self.tok.text == "[":
            self.pos += 1
            tok = self.tok
            if tok.kind != "num" or not tok.text.isdigit():
                raise DSLError("index must be a non-negative integer", tok.col)
            indices.append(int(tok.text))
            self.pos += 1
            self._expect("]")
        if len(indices) not in (0, VARIABLE_RANK[name.text]):
            raise DSLError(
                f"{name.text} takes {VARIABLE_RANK[name.text]} indices", name.col
            )
        return Var(name.text, tuple(indices))


def parse(text: str, allowed: set[str] | frozenset[str] | None = None) -> Node:
    """Parse ``text`` into an AST.

    ``allowed`` restricts which variables may appear (e.g. ``{"A", "x"}``
    for a bulk density).
    """
    return _Parser(text, frozenset(allowed) if allowed is not None else None).parse()


# ------------------------------------------------------------------ printer

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def _num_text(value: float) -> str:
    text = repr(float(value))
    if text in ("inf", "nan", "-inf"):
        raise DSLError(f"cannot print non-finite constant {text}")
    return text


def _text(node: Node, parent: int) -> str:
    if isinstance(node, Num):
        s = _num_text(node.value)
        return f"({s})" if node.value < 0 else s
    if isinstance(node, Var):
        return node.name + "".join(f"[{i}]" for i in node.indices)
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_text(a, 0) for a in node.args)})"
    if isinstance(node, Neg):
        return "-" + _text(node.operand, 3)
    if isinstance(node, Pow):
        base = _text(node.base, 4)
        if isinstance(node.base, (Neg, Pow)):
            base = f"({base})"
        return f"{base}^{_num_text(node.exponent)}"
    if isinstance(node, BinOp):
        prec = _PREC[node.op]
        left = _text(node.left, prec)
        # left-associative: a right operand of equal precedence needs parens
        right = _text(node.right, prec + 1)
        s = f"{left} {node.op} {right}"
        return f"({s})" if prec < parent else s
    raise TypeError(f"not a DSL node: {node!r}")


def to_text(node: Node) -> str:
    """Print an AST so that ``parse(to_text(node)) == node``."""
    return _text(node, 0)


# ---------------------------------------------------------------- evaluator

def _lift(a: np.ndarray, ra: int, b: np.ndarray, rb: int):
    """Align a scalar against a vector/matrix operand for broadcasting."""
    if ra == rb:
        return a, b, ra
    if ra == 0:
        return a[(...,) + (None,) * rb], b, rb
    if rb == 0:
        return a, b[(...,) + (None,) * ra], ra
    raise DSLError("operands of incompatible rank")


def _eval(node: Node, env: Mapping[str, np.ndarray]) -> tuple[np.ndarray, int]:
    if isinstance(node, Num):
        return np.asarray(node.value, dtype=float), 0
    if isinstance(node, Var):
        try:
            value = np.asarray(env[node.name], dtype=float)
        except KeyError:
            raise DSLError(f"variable {node.name!r} is not bound") from None
        rank = VARIABLE_RANK[node.name]
        if node.indices:
            shape = value.shape[value.ndim - rank:]
            for i, n in zip(node.indices, shape):
                if i >= n:
                    raise DSLError(f"index {i} out of range for {node.name}")
            return value[(...,) + node.indices], 0
        return value, rank
    if isinstance(node, Neg):
        v, r = _eval(node.operand, env)
        return -v, r
    if isinstance(node, Pow):
        v, r = _eval(node.base, env)
        return np.power(v, node.exponent), r
    if isinstance(node, BinOp):
        a, ra = _eval(node.left, env)
        b, rb = _eval(node.right, env)
        a, b, r = _lift(a, ra, b, rb)
        if node.op == "+":
            return a + b, r
        if node.op == "-":
            return a - b, r
        if node.op == "*":
            return a * b, r
        if np.any(b == 0):
            raise ZeroDivisionError("division by zero in density expression")
        return a / b, r
    if isinstance(node, Call):
        vals = [_eval(a, env) for a in node.args]
        f = node.func
        if f in ("norm", "normsq"):
            v, r = vals[0]
            sq = np.sum(v * v, axis=tuple(range(-r, 0))) if r else v * v
            return (np.sqrt(sq) if f == "norm" else sq), 0
        if f == "dot":
            (a, ra), (b, rb) = vals
            if ra != rb:
                raise DSLError("dot() needs operands of equal rank")
            prod = a * b
            return (np.sum(prod, axis=tuple(range(-ra, 0))) if ra else prod), 0
        if f in ("min", "max"):
            out, r = vals[0]
            red = np.minimum if f == "min" else np.maximum
            for v, rv in vals[1:]:
                out, v, r = _lift(out, r, v, rv)
                out = red(out, v)
            return out, r
        v, r = vals[0]
        fn = {"abs": np.abs, "sqrt": np.sqrt, "exp": np.exp, "sin": np.sin, "cos": np.cos}[f]
        return fn(v), r
    raise TypeError(f"not a DSL node: {node!r}")


def evaluate(node: Node, **env) -> np.ndarray | float:
    """Evaluate ``node``; the result must be scalar (per batch entry)."""
    value, rank = _eval(node, env)
    if rank != 0:
        raise DSLError("expression does not evaluate to a scalar")
    return float(value) if value.ndim == 0 else value


def variables(node: Node) -> set[str]:
    """Names of the variables referenced by ``node``."""
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, (Neg,)):
        return variables(node.operand)
    if isinstance(node, Pow):
        return variables(node.base)
    if isinstance(node, BinOp):
        return variables(node.left) | variables(node.right)
    if isinstance(node, Call):
        out: set[str] = set()
        for a in node.args:
            out |= variables(a)
        return out
    return set()
