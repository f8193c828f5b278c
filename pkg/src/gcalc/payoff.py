"""Expression language for cylindrical payoffs over Brownian increments.

Grammar::

    expr   := term (('+' | '-') term)*
    term   := factor ('*' factor)*
    factor := atom ('^' INT)?
    atom   := NUMBER | 'B(' TIME ')' | 'D(' INDEX ')' | 'abs(' expr ')'
            | 'min(' expr ',' expr ')' | 'max(' expr ',' expr ')'
            | 'clamp(' expr ',' NUMBER ',' NUMBER ')' | '(' expr ')' | '-' atom

``D(i)`` is the increment B(t_i) - B(t_{i-1}); ``B(t)`` must name a partition
time. Note that ``-B(1)^2`` parses as ``(-B(1))^2``; write ``-(B(1)^2)`` for
the negated square.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .model import GCalcError, TimePartition


class PayoffSyntaxError(GCalcError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class ResolutionError(GCalcError):
    """A time or increment reference does not resolve against the partition."""


# --- AST -------------------------------------------------------------------


@dataclass(frozen=True)
class Const:
    value: float


@dataclass(frozen=True)
class Inc:
    index: int


@dataclass(frozen=True)
class Level:
    index: int


@dataclass(frozen=True)
class Neg:
    arg: "Node"


@dataclass(frozen=True)
class Add:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Mul:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Pow:
    base: "Node"
    exponent: int


@dataclass(frozen=True)
class Abs:
    arg: "Node"


@dataclass(frozen=True)
class Min:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Max:
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Clamp:
    arg: "Node"
    lo: float
    hi: float


Node = Union[Const, Inc, Level, Neg, Add, Mul, Pow, Abs, Min, Max, Clamp]


def growth_degree(node: Node) -> int:
    """Structural bound on the polynomial growth of ``node``."""
    if isinstance(node, Const):
        return 0
    if isinstance(node, (Inc, Level)):
        return 0 if isinstance(node, Level) and node.index == 0 else 1
    if isinstance(node, (Neg, Abs)):
        return growth_degree(node.arg)
    if isinstance(node, (Add, Min, Max)):
        return max(growth_degree(node.left), growth_degree(node.right))
    if isinstance(node, Mul):
        return growth_degree(node.left) + growth_degree(node.right)
    if isinstance(node, Pow):
        return node.exponent * growth_degree(node.base)
    if isinstance(node, Clamp):
        return 0
    raise TypeError(f"not a payoff node: {node!r}")


def _walk(node: Node):
    yield node
    for name in ("arg", "left", "right", "base"):
        child = getattr(node, name, None)
        if child is not None:
            yield from _walk(child)


@dataclass(frozen=True)
class PayoffExpr:
    """A cylindrical payoff resolved against a partition."""

    root: Node
    partition: TimePartition
    growth_degree: int = field(init=False)

    def __post_init__(self):
        n = self.partition.n
        for node in _walk(self.root):
            if isinstance(node, Inc) and not 1 <= node.index <= n:
                raise ResolutionError(f"increment D({node.index}) outside 1..{n}")
            if isinstance(node, Level) and not 0 <= node.index <= n:
                raise ResolutionError(f"level index {node.index} outside 0..{n}")
            if isinstance(node, Clamp) and not node.lo <= node.hi:
                raise GCalcError(f"clamp bounds out of order: {node.lo} > {node.hi}")
        object.__setattr__(self, "growth_degree", growth_degree(self.root))

    @property
    def n(self) -> int:
        return self.partition.n

    @property
    def bounded(self) -> bool:
        return self.growth_degree == 0

    def depends_on(self) -> frozenset[int]:
        """Indices of the increments the payoff reads."""
        used = set()
        for node in _walk(self.root):
            if isinstance(node, Inc):
                used.add(node.index)
            elif isinstance(node, Level):
                used.update(range(1, node.index + 1))
        return frozenset(used)

    def evaluate(self, increments: Sequence) -> np.ndarray:
        """Evaluate on increments ``[x_1, ..., x_n]`` (broadcastable arrays)."""
        if len(increments) != self.n:
            raise GCalcError(f"expected {self.n} increments, got {len(increments)}")
        xs = [np.asarray(x, dtype=float) for x in increments]
        levels = [np.zeros(())]
        for x in xs:
            levels.append(levels[-1] + x)
        out = _eval(self.root, xs, levels)
        shape = np.broadcast_shapes(*(x.shape for x in xs)) if xs else ()
        return np.broadcast_to(out, shape).astype(float, copy=True)

    def negate(self) -> "PayoffExpr":
        return PayoffExpr(Neg(self.root), self.partition)

    def text(self) -> str:
        return to_text(self.root, self.partition)

    def __str__(self) -> str:
        return self.text()


def _eval(node: Node, xs, levels):
    if isinstance(node, Const):
        return np.float64(node.value)
    if isinstance(node, Inc):
        return xs[node.index - 1]
    if isinstance(node, Level):
        return levels[node.index]
    if isinstance(node, Neg):
        return -_eval(node.arg, xs, levels)
    if isinstance(node, Add):
        return _eval(node.left, xs, levels) + _eval(node.right, xs, levels)
    if isinstance(node, Mul):
        return _eval(node.left, xs, levels) * _eval(node.right, xs, levels)
    if isinstance(node, Pow):
        return _eval(node.base, xs, levels) ** node.exponent
    if isinstance(node, Abs):
        return np.abs(_eval(node.arg, xs, levels))
    if isinstance(node, Min):
        return np.minimum(_eval(node.left, xs, levels), _eval(node.right, xs, levels))
    if isinstance(node, Max):
        return np.maximum(_eval(node.left, xs, levels), _eval(node.right, xs, levels))
    if isinstance(node, Clamp):
        return np.clip(_eval(node.arg, xs, levels), node.lo, node.hi)
    raise TypeError(f"not a payoff node: {node!r}")


# --- canonical printer -----------------------------------------------------


def _num(v: float) -> str:
    if not np.isfinite(v):
        raise GCalcError(f"cannot print non-finite constant {v}")
    return repr(float(v))


def to_text(node: Node, partition: TimePartition) -> str:
    """Canonical text; parsing it back yields the same AST."""

    def atom(x):
        s = p(x)
        return f"({s})" if isinstance(x, Pow) else s

    def p(x):
        if isinstance(x, Const):
            return _num(x.value) if x.value >= 0 else f"(0.0 - {_num(-x.value)})"
        if isinstance(x, Inc):
            return f"D({x.index})"
        if isinstance(x, Level):
            return f"B({_num(partition.times[x.index])})"
        if isinstance(x, Neg):
            return "-" + atom(x.arg)
        if isinstance(x, Add):
            if isinstance(x.right, Neg):
                return f"({p(x.left)} - {p(x.right.arg)})"
            return f"({p(x.left)} + {p(x.right)})"
        if isinstance(x, Mul):
            return f"({p(x.left)} * {p(x.right)})"
        if isinstance(x, Pow):
            return f"{atom(x.base)}^{x.exponent}"
        if isinstance(x, Abs):
            return f"abs({p(x.arg)})"
        if isinstance(x, Min):
            return f"min({p(x.left)}, {p(x.right)})"
        if isinstance(x, Max):
            return f"max({p(x.left)}, {p(x.right)})"
        if isinstance(x, Clamp):
            return f"clamp({p(x.arg)}, {_num(x.lo)}, {_num(x.hi)})"
        raise TypeError(f"not a payoff node: {x!r}")

    return p(node)


# --- parser ----------------------------------------------------------------

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<name>[A-Za-z_]\w*)|(?P<op>[-+*^(),])|(?P<bad>\S))"
)
_FUNCS = {"B", "D", "abs", "min", "max", "clamp"}


def _tokenize(text: str):
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:  # only trailing whitespace left
            break
        start = m.start(m.lastgroup)
        kind = m.lastgroup
        value = m.group(kind)
        if kind == "bad":
            hint = "division is not supported" if value == "/" else f"unexpected character {value!r}"
            raise PayoffSyntaxError(hint, start)
        tokens.append((kind, value, start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, partition: TimePartition):
        self.text = text
        self.partition = partition
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
        if v != value or kind not in ("op",):
            raise PayoffSyntaxError(f"expected {value!r}, found {v or 'end of input'!r}", pos)

    def parse(self) -> Node:
        node = self.expr()
        kind, v, pos = self.peek()
        if kind != "end":
            raise PayoffSyntaxError(f"unexpected {v!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            node = Add(node, rhs if op == "+" else Neg(rhs))
        return node

    def term(self):
        node = self.factor()
        while self.peek()[:2] == ("op", "*"):
            self.take()
            node = Mul(node, self.factor())
        return node

    def factor(self):
        node = self.atom()
        if self.peek()[:2] == ("op", "^"):
            self.take()
            kind, v, pos = self.take()
            if kind != "num" or not v.isdigit():
                raise PayoffSyntaxError("exponent must be a non-negative integer", pos)
            node = Pow(node, int(v))
        return node

    def signed_number(self) -> float:
        sign = 1.0
        if self.peek()[:2] == ("op", "-"):
            self.take()
            sign = -1.0
        kind, v, pos = self.take()
        if kind != "num":
            raise PayoffSyntaxError("expected a number", pos)
        return sign * float(v)

    def atom(self):
        kind, v, pos = self.take()
        if kind == "num":
            return Const(float(v))
        if kind == "op" and v == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "op" and v == "-":
            return Neg(self.atom())
        if kind == "name":
            if v not in _FUNCS:
                raise PayoffSyntaxError(f"unsupported construct {v!r}", pos)
            self.expect("(")
            if v == "B":
                k, num, p = self.take()
                if k != "num":
                    raise PayoffSyntaxError("B(...) needs a time", p)
                idx = self.partition.index_of(float(num))
                if idx is None:
                    raise ResolutionError(
                        f"time {num} is not in the partition {list(self.partition.times)} (at position {p})"
                    )
                self.expect(")")
                return Level(idx)
            if v == "D":
                k, num, p = self.take()
                if k != "num" or not num.isdigit():
                    raise PayoffSyntaxError("D(...) needs an integer index", p)
                idx = int(num)
                if not 1 <= idx <= self.partition.n:
                    raise ResolutionError(
                        f"increment D({idx}) outside 1..{self.partition.n} (at position {p})"
                    )
                self.expect(")")
                return Inc(idx)
            if v == "abs":
                node = self.expr()
                self.expect(")")
                return Abs(node)
            if v in ("min", "max"):
                a = self.expr()
                self.expect(",")
                b = self.expr()
                self.expect(")")
                return (Min if v == "min" else Max)(a, b)
            node = self.expr()
            self.expect(",")
            lo = self.signed_number()
            self.expect(",")
            hi = self.signed_number()
            self.expect(")")
            if lo > hi:
                raise PayoffSyntaxError(f"clamp bounds out of order ({lo} > {hi})", pos)
            return Clamp(node, lo, hi)
        raise PayoffSyntaxError(f"unexpected {v or 'end of input'!r}", pos)


def parse_payoff(text: str, partition: TimePartition) -> PayoffExpr:
    """Parse ``text`` into a payoff resolved against ``partition``."""
    return PayoffExpr(_Parser(text, partition).parse(), partition)


def constant_payoff(c: float, partition: TimePartition) -> PayoffExpr:
    c = float(c)
    return PayoffExpr(Const(c) if c >= 0 else Neg(Const(-c)), partition)
