"""Tiny total expression language for config-defined coefficients.

Vocabulary: literals; variables t, s (1-based state index), x[i], y[j],
z[j][k]; binary + - * /; unary -; functions sin, cos, tanh, exp, abs, min,
max, pow.  No conditionals, no loops, no user functions: every expression is
a pure map of its context, which keeps coefficients Lipschitz-checkable by
sampling and evaluation cost negligible inside sweeps.

Indices are bounds-checked at parse time against the declared (n, m, d).
Errors carry deterministic line:column positions; evaluation never lets a
NaN/Inf propagate silently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np

MAX_DEPTH = 64

_FUNCTIONS = {
    "sin": 1, "cos": 1, "tanh": 1, "exp": 1, "abs": 1,
    "min": 2, "max": 2, "pow": 2,
}


class ParseError(ValueError):
    def __init__(self, message: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class EvalError(ArithmeticError):
    def __init__(self, message: str, span: str):
        super().__init__(f"{message} in '{span}'")
        self.span = span


@dataclass(frozen=True)
class Pos:
    line: int = field(compare=False, default=1)
    col: int = field(compare=False, default=1)


@dataclass(frozen=True)
class Literal:
    value: float
    pos: Pos = field(compare=False, default=Pos())


@dataclass(frozen=True)
class Var:
    name: str                     # "t" | "s" | "x" | "y" | "z"
    indices: tuple = ()           # 1-based, () for t and s
    pos: Pos = field(compare=False, default=Pos())


@dataclass(frozen=True)
class Neg:
    operand: "Expression"
    pos: Pos = field(compare=False, default=Pos())


@dataclass(frozen=True)
class BinOp:
    op: str                       # "+" | "-" | "*" | "/"
    left: "Expression"
    right: "Expression"
    pos: Pos = field(compare=False, default=Pos())


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple
    pos: Pos = field(compare=False, default=Pos())


Expression = Union[Literal, Var, Neg, BinOp, Call]


@dataclass
class EvalContext:
    """Evaluation point: time, 1-based state index, and the triple (x, y, z).

    x, y, z may carry a leading node axis; evaluation then broadcasts and
    returns an array of per-node values.
    """

    t: float
    state: int
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    n: int
    m: int
    d: int

    def check(self) -> None:
        x = np.asarray(self.x)
        y = np.asarray(self.y)
        z = np.asarray(self.z)
        if x.shape[-1] != self.n or y.shape[-1] != self.m \
                or z.shape[-2:] != (self.m, self.d):
            raise ValueError(
                f"context dimensions {x.shape[-1]}/{y.shape[-1]}/{z.shape[-2:]} "
                f"do not match declared ({self.n}, {self.m}, {self.d})"
            )


# -- tokenizer -----------------------------------------------------------------


@dataclass(frozen=True)
class _Token:
    kind: str      # "num" | "name" | "punct" | "end"
    text: str
    line: int
    col: int


_PUNCT = set("+-*/()[],")


def _tokenize(source: str) -> list[_Token]:
    tokens = []
    line, col = 1, 1
    i = 0
    n = len(source)
    while i < n:
        ch = source[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        start_col = start = i
        if ch.isdigit() or (ch == "." and i + 1 < n and source[i + 1].isdigit()):
            j = i
            while j < n and (source[j].isdigit() or source[j] == "."):
                j += 1
            if j < n and source[j] in "eE":
                k = j + 1
                if k < n and source[k] in "+-":
                    k += 1
                if k < n and source[k].isdigit():
                    j = k
                    while j < n and source[j].isdigit():
                        j += 1
            text = source[i:j]
            try:
                float(text)
            except ValueError:
                raise ParseError(f"malformed number '{text}'", line, col)
            tokens.append(_Token("num", text, line, col))
            col += j - i
            i = j
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (source[j].isalnum() or source[j] == "_"):
                j += 1
            tokens.append(_Token("name", source[i:j], line, col))
            col += j - i
            i = j
            continue
        if ch in _PUNCT:
            tokens.append(_Token("punct", ch, line, col))
            i += 1
            col += 1
            continue
        raise ParseError(f"illegal character {ch!r}", line, col)
    tokens.append(_Token("end", "", line, col))
    return tokens


# -- parser --------------------------------------------------------------------


class _Parser:
    def __init__(self, tokens: list[_Token], dims: tuple[int, int, int]):
        self.tokens = tokens
        self.i = 0
        self.n, self.m, self.d = dims
        self.depth = 0

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, text: str) -> _Token:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == text:
            return self.advance()
        raise ParseError(f"expected '{text}', found '{tok.text or 'end'}'",
                         tok.line, tok.col)

    def _enter(self, tok: _Token):
        self.depth += 1
        if self.depth > MAX_DEPTH:
            raise ParseError(f"expression depth exceeds {MAX_DEPTH}",
                             tok.line, tok.col)

    def _leave(self):
        self.depth -= 1

    def parse_expr(self) -> Expression:
        tok = self.peek()
        self._enter(tok)
        node = self.parse_term()
        while self.peek().kind == "punct" and self.peek().text in "+-":
            op = self.advance()
            right = self.parse_term()
            node = BinOp(op.text, node, right, Pos(op.line, op.col))
        self._leave()
        return node

    def parse_term(self) -> Expression:
        tok = self.peek()
        self._enter(tok)
        node = self.parse_unary()
        while self.peek().kind == "punct" and self.peek().text in "*/":
            op = self.advance()
            right = self.parse_unary()
            node = BinOp(op.text, node, right, Pos(op.line, op.col))
        self._leave()
        return node

    def parse_unary(self) -> Expression:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "-":
            self.advance()
            self._enter(tok)
            operand = self.parse_unary()
            self._leave()
            return Neg(operand, Pos(tok.line, tok.col))
        return self.parse_atom()

    def parse_atom(self) -> Expression:
        tok = self.advance()
        pos = Pos(tok.line, tok.col)
        if tok.kind == "num":
            return Literal(float(tok.text), pos)
        if tok.kind == "punct" and tok.text == "(":
            self._enter(tok)
            node = self.parse_expr()
            self._leave()
            self.expect(")")
            return node
        if tok.kind == "name":
            name = tok.text
            if name in ("t", "s"):
                return Var(name, (), pos)
            if name in ("x", "y", "z"):
                first = self._index(name, tok)
                if name == "z":
                    second = self._index(name, tok, axis=1)
                    return Var("z", (first, second), pos)
                bound = self.n if name == "x" else self.m
                if not 1 <= first <= bound:
                    raise ParseError(
                        f"index {name}[{first}] out of range 1..{bound}",
                        tok.line, tok.col)
                return Var(name, (first,), pos)
            if name in _FUNCTIONS:
                arity = _FUNCTIONS[name]
                self.expect("(")
                self._enter(tok)
                args = [self.parse_expr()]
                while self.peek().kind == "punct" and self.peek().text == ",":
                    self.advance()
                    args.append(self.parse_expr())
                self._leave()
                self.expect(")")
                if len(args) != arity:
                    raise ParseError(
                        f"{name} takes {arity} argument(s), got {len(args)}",
                        tok.line, tok.col)
                return Call(name, tuple(args), pos)
            raise ParseError(f"unknown identifier '{name}'", tok.line, tok.col)
        raise ParseError(f"unexpected '{tok.text or 'end'}'", tok.line, tok.col)

    def _index(self, name: str, tok: _Token, axis: int = 0) -> int:
        self.expect("[")
        num = self.advance()
        if num.kind != "num" or "." in num.text or "e" in num.text.lower():
            raise ParseError(f"{name} index must be an integer literal",
                             num.line, num.col)
        self.expect("]")
        idx = int(num.text)
        if name == "z":
            bound = self.m if axis == 0 else self.d
            if not 1 <= idx <= bound:
                raise ParseError(
                    f"index z[...] component {idx} out of range 1..{bound}",
                    tok.line, tok.col)
        return idx


def parse(source: str, dims: tuple[int, int, int]) -> Expression:
    """Parse a coefficient expression against declared dimensions (n, m, d)."""
    parser = _Parser(_tokenize(source), dims)
    node = parser.parse_expr()
    tail = parser.peek()
    if tail.kind != "end":
        raise ParseError(f"trailing input '{tail.text}'", tail.line, tail.col)
    return node


# -- evaluation ------------------------------------------------------------------


def evaluate(expr: Expression, ctx: EvalContext):
    """Evaluate with IEEE double semantics; any non-finite result is an error.

    Division by zero and domain errors raise EvalError carrying the pretty
    printed offending subexpression instead of propagating NaN into a solver.
    """
    ctx.check()
    return _eval(expr, ctx)


def _eval(expr: Expression, ctx: EvalContext):
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, Var):
        if expr.name == "t":
            return ctx.t
        if expr.name == "s":
            return float(ctx.state)
        if expr.name == "x":
            return np.asarray(ctx.x, dtype=float)[..., expr.indices[0] - 1]
        if expr.name == "y":
            return np.asarray(ctx.y, dtype=float)[..., expr.indices[0] - 1]
        j, k = expr.indices
        return np.asarray(ctx.z, dtype=float)[..., j - 1, k - 1]
    if isinstance(expr, Neg):
        return -_eval(expr.operand, ctx)
    if isinstance(expr, BinOp):
        left = _eval(expr.left, ctx)
        right = _eval(expr.right, ctx)
        if expr.op == "+":
            out = left + right
        elif expr.op == "-":
            out = left - right
        elif expr.op == "*":
            out = left * right
        else:
            if np.any(np.asarray(right) == 0.0):
                raise EvalError("division by zero", pretty(expr))
            out = left / right
        return _check_finite(out, expr)
    if isinstance(expr, Call):
        args = [_eval(a, ctx) for a in expr.args]
        fn = {
            "sin": np.sin, "cos": np.cos, "tanh": np.tanh, "exp": np.exp,
            "abs": np.abs, "min": np.minimum, "max": np.maximum,
            "pow": np.power,
        }[expr.func]
        with np.errstate(all="ignore"):
            out = fn(*args)
        return _check_finite(out, expr)
    raise TypeError(f"not an expression node: {expr!r}")


def _check_finite(out, expr: Expression):
    if not np.all(np.isfinite(out)):
        raise EvalError("non-finite result", pretty(expr))
    return out


# -- pretty printer ---------------------------------------------------------------

_PRECEDENCE = {"+": 1, "-": 1, "*": 2, "/": 2}


def pretty(expr: Expression) -> str:
    """Render an AST; parse(pretty(e), dims) reproduces e structurally."""
    if isinstance(expr, Literal):
        return repr(expr.value)
    if isinstance(expr, Var):
        if not expr.indices:
            return expr.name
        if expr.name == "z":
            return f"z[{expr.indices[0]}][{expr.indices[1]}]"
        return f"{expr.name}[{expr.indices[0]}]"
    if isinstance(expr, Neg):
        inner = pretty(expr.operand)
        if isinstance(expr.operand, BinOp):
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(expr, BinOp):
        lhs = pretty(expr.left)
        rhs = pretty(expr.right)
        prec = _PRECEDENCE[expr.op]
        if isinstance(expr.left, BinOp) and _PRECEDENCE[expr.left.op] < prec:
            lhs = f"({lhs})"
        if isinstance(expr.right, (BinOp, Neg)):
            rprec = _PRECEDENCE[expr.right.op] if isinstance(expr.right, BinOp) else 0
            if rprec <= prec:
                rhs = f"({rhs})"
        return f"{lhs} {expr.op} {rhs}"
    if isinstance(expr, Call):
        return f"{expr.func}({', '.join(pretty(a) for a in expr.args)})"
    raise TypeError(f"not an expression node: {expr!r}")
