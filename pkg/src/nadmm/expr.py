"""Scalar expression trees with exact symbolic first and second derivatives.

Objectives and constraint components are written as small ASTs over named
variables.  Derivatives are obtained by differentiating the tree itself
(with constant folding), so Hessians are exact rather than approximated.

Two evaluation paths exist: :func:`evaluate` walks the tree directly, and
:class:`CompiledExpr` turns the tree and its derivative trees into a single
straight-line Python function for use inside solver loops.
"""

from __future__ import annotations

import json
import math
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

__all__ = [
    "Expr", "Const", "Var", "Add", "Mul", "Pow", "Neg", "Sin", "Cos", "Exp",
    "Point", "ExprSyntaxError", "MissingVariableError",
    "parse_expr", "to_json", "to_text", "variables_of",
    "evaluate", "diff", "grad", "hess", "CompiledExpr",
]


class ExprSyntaxError(ValueError):
    """Raised when an expression source does not conform to the grammar.

    ``location`` is a JSON path (``"$.add[1]"``) for tree input or a
    0-based character offset for infix text.
    """

    def __init__(self, message, location=None):
        self.location = location
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)


class MissingVariableError(KeyError):
    """Raised when an expression references a variable absent from the point."""


# ---------------------------------------------------------------------------
# AST

class Expr:
    """Base class for expression nodes.  Nodes are immutable."""

    __slots__ = ()

    def __add__(self, other):
        return Add(self, _lift(other))

    def __radd__(self, other):
        return Add(_lift(other), self)

    def __sub__(self, other):
        return Add(self, Neg(_lift(other)))

    def __rsub__(self, other):
        return Add(_lift(other), Neg(self))

    def __mul__(self, other):
        return Mul(self, _lift(other))

    def __rmul__(self, other):
        return Mul(_lift(other), self)

    def __neg__(self):
        return Neg(self)

    def __pow__(self, exponent):
        return Pow(self, exponent)

    def __str__(self):
        return to_text(self)


@dataclass(frozen=True, eq=True, repr=True)
class Const(Expr):
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class Add(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Mul(Expr):
    left: Expr
    right: Expr


@dataclass(frozen=True)
class Pow(Expr):
    base: Expr
    exponent: int

    def __post_init__(self):
        e = self.exponent
        if isinstance(e, bool) or not isinstance(e, (int, np.integer)):
            raise ExprSyntaxError(f"non-integer exponent {e!r}")
        if e < 0:
            raise ExprSyntaxError(f"negative exponent {e!r}")
        object.__setattr__(self, "exponent", int(e))


@dataclass(frozen=True)
class Neg(Expr):
    arg: Expr


@dataclass(frozen=True)
class Sin(Expr):
    arg: Expr


@dataclass(frozen=True)
class Cos(Expr):
    arg: Expr


@dataclass(frozen=True)
class Exp(Expr):
    arg: Expr


_UNARY = {"neg": Neg, "sin": Sin, "cos": Cos, "exp": Exp}
_UNARY_NAME = {cls: name for name, cls in _UNARY.items()}
_FUNCS = {"sin": Sin, "cos": Cos, "exp": Exp}


def _lift(value):
    if isinstance(value, Expr):
        return value
    if isinstance(value, str):
        return Var(value)
    return Const(value)


def variables_of(e):
    """Return the set of variable names referenced by ``e``."""
    out = set()
    stack = [e]
    while stack:
        node = stack.pop()
        if isinstance(node, Var):
            out.add(node.name)
        elif isinstance(node, (Add, Mul)):
            stack.extend((node.left, node.right))
        elif isinstance(node, Pow):
            stack.append(node.base)
        elif isinstance(node, (Neg, Sin, Cos, Exp)):
            stack.append(node.arg)
    return out


# ---------------------------------------------------------------------------
# Points

class Point(Mapping):
    """Assignment of real values to variables in a fixed declaration order.

    Parameters
    ----------
    names : sequence of str
        Declared variable names; their order defines the dense vector view.
    values : array_like
        Values in the same order as ``names``.
    """

    __slots__ = ("_names", "_values", "_index")

    def __init__(self, names, values):
        names = tuple(names)
        values = np.array(values, dtype=float).reshape(-1)
        if len(set(names)) != len(names):
            raise ValueError("duplicate variable names in point")
        if values.shape[0] != len(names):
            raise ValueError(
                f"point has {values.shape[0]} values for {len(names)} variables")
        values.setflags(write=False)
        self._names = names
        self._values = values
        self._index = {name: i for i, name in enumerate(names)}

    @classmethod
    def from_mapping(cls, mapping):
        if isinstance(mapping, Point):
            return mapping
        return cls(list(mapping), [mapping[k] for k in mapping])

    @property
    def names(self):
        return self._names

    def as_vector(self):
        return self._values.copy()

    def __getitem__(self, name):
        try:
            return float(self._values[self._index[name]])
        except KeyError:
            raise MissingVariableError(name) from None

    def __iter__(self):
        return iter(self._names)

    def __len__(self):
        return len(self._names)

    def __repr__(self):
        body = ", ".join(f"{k}={v!r}" for k, v in zip(self._names, self._values))
        return f"Point({body})"


def _as_point(p):
    if isinstance(p, Point):
        return p
    if isinstance(p, Mapping):
        return Point.from_mapping(p)
    raise TypeError(f"expected a Point or mapping, got {type(p).__name__}")


# ---------------------------------------------------------------------------
# Parsing and serialization

def parse_expr(source):
    """Parse an expression from a JSON tree or from infix text.

    ``source`` may be an already-decoded JSON node (a dict with exactly one
    key from ``const, var, add, mul, pow, neg, sin, cos, exp``), a JSON
    string encoding such a node, or infix text such as ``"x^2 - 1"``.
    Infix text supports ``+ - * ^``, parentheses, numeric literals,
    identifiers and the calls ``sin(.)``, ``cos(.)``, ``exp(.)``.

    Raises
    ------
    ExprSyntaxError
        On malformed input, unknown operators or non-integer exponents.
    """
    if isinstance(source, Expr):
        return source
    if isinstance(source, str):
        text = source.strip()
        if text.startswith("{"):
            try:
                node = json.loads(text)
            except json.JSONDecodeError as exc:
                raise ExprSyntaxError(f"invalid JSON: {exc.msg}", exc.pos) from None
            return _from_tree(node, "$")
        return _InfixParser(source).parse()
    return _from_tree(source, "$")


def _from_tree(node, path):
    if not isinstance(node, dict) or len(node) != 1:
        raise ExprSyntaxError("expression node must be an object with exactly one key", path)
    (key, arg), = node.items()
    here = f"{path}.{key}"
    if key == "const":
        if isinstance(arg, bool) or not isinstance(arg, (int, float)):
            raise ExprSyntaxError("const expects a number", here)
        if not math.isfinite(arg):
            raise ExprSyntaxError("const must be finite", here)
        return Const(arg)
    if key == "var":
        if not isinstance(arg, str) or not arg:
            raise ExprSyntaxError("var expects a non-empty name", here)
        return Var(arg)
    if key in ("add", "mul"):
        if not isinstance(arg, list) or len(arg) < 2:
            raise ExprSyntaxError(f"{key} expects a list of at least 2 children", here)
        cls = Add if key == "add" else Mul
        out = _from_tree(arg[0], f"{here}[0]")
        for i, child in enumerate(arg[1:], start=1):
            out = cls(out, _from_tree(child, f"{here}[{i}]"))
        return out
    if key == "pow":
        if not isinstance(arg, list) or len(arg) != 2:
            raise ExprSyntaxError("pow expects [child, integer]", here)
        exponent = arg[1]
        if isinstance(exponent, bool) or not isinstance(exponent, int):
            raise ExprSyntaxError(f"non-integer exponent {exponent!r}", f"{here}[1]")
        if exponent < 0:
            raise ExprSyntaxError(f"negative exponent {exponent!r}", f"{here}[1]")
        return Pow(_from_tree(arg[0], f"{here}[0]"), exponent)
    if key in _UNARY:
        return _UNARY[key](_from_tree(arg, here))
    raise ExprSyntaxError(f"unknown operator {key!r}", path)


def to_json(e):
    """Serialize ``e`` to the JSON tree form (a plain dict)."""
    if isinstance(e, Const):
        return {"const": e.value}
    if isinstance(e, Var):
        return {"var": e.name}
    if isinstance(e, Add):
        return {"add": [to_json(e.left), to_json(e.right)]}
    if isinstance(e, Mul):
        return {"mul": [to_json(e.left), to_json(e.right)]}
    if isinstance(e, Pow):
        return {"pow": [to_json(e.base), e.exponent]}
    return {_UNARY_NAME[type(e)]: to_json(e.arg)}


def to_text(e):
    """Render ``e`` as fully parenthesized infix text (parseable)."""
    if isinstance(e, Const):
        return repr(e.value) if math.copysign(1.0, e.value) > 0 else f"({e.value!r})"
    if isinstance(e, Var):
        return e.name
    if isinstance(e, Add):
        return f"({to_text(e.left)} + {to_text(e.right)})"
    if isinstance(e, Mul):
        return f"({to_text(e.left)} * {to_text(e.right)})"
    if isinstance(e, Pow):
        return f"({to_text(e.base)} ^ {e.exponent})"
    if isinstance(e, Neg):
        if isinstance(e.arg, Const):
            return f"(-({to_text(e.arg)}))"
        return f"(-{to_text(e.arg)})"
    return f"{_UNARY_NAME[type(e)]}({to_text(e.arg)})"


_TOKEN = re.compile(r"\s*(?:(\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
                    r"|([A-Za-z_][A-Za-z0-9_.\[\]]*)|(\*\*|[-+*^()]))")


class _InfixParser:
    # expr   := term (('+'|'-') term)*
    # term   := unary ('*' unary)*
    # unary  := '-' unary | power
    # power  := atom ('^' INT)?
    # atom   := NUMBER | NAME | FUNC '(' expr ')' | '(' expr ')'

    def __init__(self, text):
        self.text = text
        self.tokens = []
        pos = 0
        while pos < len(text):
            if text[pos:].strip() == "":
                break
            m = _TOKEN.match(text, pos)
            if m is None or m.end() == pos:
                start = pos + len(text[pos:]) - len(text[pos:].lstrip())
                raise ExprSyntaxError(f"unexpected character {text[start]!r}", start)
            kind = "num" if m.group(1) else "name" if m.group(2) else "op"
            value = m.group(1) or m.group(2) or m.group(3)
            if value == "**":
                value = "^"
            self.tokens.append((kind, value, m.start(m.lastindex)))
            pos = m.end()
        self.i = 0

    def _peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None, len(self.text))

    def _take(self, value=None):
        tok = self._peek()
        if value is not None and tok[1] != value:
            raise ExprSyntaxError(f"expected {value!r}, found {tok[1] or 'end of input'!r}", tok[2])
        self.i += 1
        return tok

    def parse(self):
        if not self.tokens:
            raise ExprSyntaxError("empty expression", 0)
        out = self._expr()
        if self.i != len(self.tokens):
            tok = self._peek()
            raise ExprSyntaxError(f"unexpected token {tok[1]!r}", tok[2])
        return out

    def _expr(self):
        out = self._term()
        while self._peek()[1] in ("+", "-"):
            op = self._take()[1]
            rhs = self._term()
            out = Add(out, rhs) if op == "+" else Add(out, Neg(rhs))
        return out

    def _term(self):
        out = self._unary()
        while self._peek()[1] == "*":
            self._take()
            out = Mul(out, self._unary())
        return out

    def _unary(self):
        if self._peek()[1] == "-":
            self._take()
            return Neg(self._unary())
        return self._power()

    def _power(self):
        base = self._atom()
        if self._peek()[1] == "^":
            self._take()
            neg = False
            if self._peek()[1] == "-":
                self._take()
                neg = True
            kind, value, where = self._take()
            if kind != "num" or neg or not re.fullmatch(r"\d+", value):
                raise ExprSyntaxError(f"non-integer exponent {'-' if neg else ''}{value!r}", where)
            return Pow(base, int(value))
        return base

    def _atom(self):
        kind, value, where = self._peek()
        if kind == "num":
            self._take()
            return Const(float(value))
        if kind == "name":
            self._take()
            if value in _FUNCS and self._peek()[1] == "(":
                self._take("(")
                arg = self._expr()
                self._take(")")
                return _FUNCS[value](arg)
            return Var(value)
        if value == "(":
            self._take()
            # "(-NUMBER)" is how negative constants are written back out
            ahead = self.tokens[self.i:self.i + 3]
            if (len(ahead) == 3 and ahead[0][1] == "-" and ahead[1][0] == "num"
                    and ahead[2][1] == ")"):
                self.i += 3
                return Const(-float(ahead[1][1]))
            out = self._expr()
            self._take(")")
            return out
        raise ExprSyntaxError(f"unexpected {value or 'end of input'!r}", where)


# ---------------------------------------------------------------------------
# Evaluation and differentiation

def evaluate(e, p):
    """Evaluate ``e`` at point ``p`` (a :class:`Point` or mapping)."""
    p = _as_point(p)
    return _eval(e, p)


def _eval(e, p):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return p[e.name]
    if isinstance(e, Add):
        return _eval(e.left, p) + _eval(e.right, p)
    if isinstance(e, Mul):
        return _eval(e.left, p) * _eval(e.right, p)
    if isinstance(e, Pow):
        base = _eval(e.base, p)
        out = 1.0
        for _ in range(e.exponent):
            out *= base
        return out
    if isinstance(e, Neg):
        return -_eval(e.arg, p)
    if isinstance(e, Sin):
        return math.sin(_eval(e.arg, p))
    if isinstance(e, Cos):
        return math.cos(_eval(e.arg, p))
    if isinstance(e, Exp):
        return math.exp(_eval(e.arg, p))
    raise TypeError(f"not an expression node: {e!r}")


def _is_const(e, value=None):
    return isinstance(e, Const) and (value is None or e.value == value)


def _add(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value + b.value)
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    return Add(a, b)


def _mul(a, b):
    if _is_const(a) and _is_const(b):
        return Const(a.value * b.value)
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return Const(0.0)
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    return Mul(a, b)


def _neg(a):
    if _is_const(a):
        return Const(-a.value)
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def _pow(a, n):
    if n == 0:
        return Const(1.0)
    if n == 1:
        return a
    if _is_const(a):
        return Const(a.value ** n)
    return Pow(a, n)


@lru_cache(maxsize=4096)
def diff(e, name):
    """Symbolic partial derivative of ``e`` with respect to variable ``name``."""
    if isinstance(e, Const):
        return Const(0.0)
    if isinstance(e, Var):
        return Const(1.0 if e.name == name else 0.0)
    if isinstance(e, Add):
        return _add(diff(e.left, name), diff(e.right, name))
    if isinstance(e, Mul):
        return _add(_mul(diff(e.left, name), e.right), _mul(e.left, diff(e.right, name)))
    if isinstance(e, Pow):
        du = diff(e.base, name)
        if _is_const(du, 0.0) or e.exponent == 0:
            return Const(0.0)
        return _mul(_mul(Const(e.exponent), _pow(e.base, e.exponent - 1)), du)
    if isinstance(e, Neg):
        return _neg(diff(e.arg, name))
    du = diff(e.arg, name)
    if _is_const(du, 0.0):
        return Const(0.0)
    if isinstance(e, Sin):
        return _mul(Cos(e.arg), du)
    if isinstance(e, Cos):
        return _neg(_mul(Sin(e.arg), du))
    if isinstance(e, Exp):
        return _mul(e, du)
    raise TypeError(f"not an expression node: {e!r}")


def grad(e, p):
    """Gradient of ``e`` at ``p``, ordered as the point's declared variables."""
    p = _as_point(p)
    _check_vars(e, p)
    return np.array([_eval(diff(e, name), p) for name in p.names])


def hess(e, p):
    """Hessian of ``e`` at ``p``; exactly symmetric (upper triangle mirrored)."""
    p = _as_point(p)
    _check_vars(e, p)
    names = p.names
    n = len(names)
    out = np.zeros((n, n))
    for i in range(n):
        di = diff(e, names[i])
        for j in range(i, n):
            out[i, j] = out[j, i] = _eval(diff(di, names[j]), p)
    return out


def _check_vars(e, p):
    missing = variables_of(e) - set(p.names)
    if missing:
        raise MissingVariableError(", ".join(sorted(missing)))


# ---------------------------------------------------------------------------
# Compilation

class CompiledExpr:
    """Fast numeric evaluator for an expression and its exact derivatives.

    The expression, its gradient trees and the upper triangle of its Hessian
    trees are emitted as straight-line Python code with shared
    subexpressions.  Calls take dense vectors in the order of ``variables``.

    Parameters
    ----------
    e : Expr
    variables : sequence of str
        Declared variable order.  Every variable of ``e`` must appear here.
    """

    def __init__(self, e, variables):
        self.expr = e
        self.variables = tuple(variables)
        missing = variables_of(e) - set(self.variables)
        if missing:
            raise MissingVariableError(", ".join(sorted(missing)))
        n = len(self.variables)
        active = [i for i, v in enumerate(self.variables) if v in variables_of(e)]
        grads = {i: diff(e, self.variables[i]) for i in active}
        hess_entries = {}
        for a, i in enumerate(active):
            for j in active[a:]:
                d2 = diff(grads[i], self.variables[j])
                if not _is_const(d2, 0.0):
                    hess_entries[(i, j)] = d2
        self._n = n
        index = {v: i for i, v in enumerate(self.variables)}
        self._value = _codegen([e], index)
        self._grad_index = list(grads)
        self._grad = _codegen(list(grads.values()), index)
        self._hess_index = list(hess_entries)
        self._hess = _codegen(list(hess_entries.values()), index)

    def value(self, x):
        return self._value(x)[0]

    def gradient(self, x):
        out = np.zeros(self._n)
        if self._grad_index:
            out[self._grad_index] = self._grad(x)
        return out

    def hessian(self, x):
        out = np.zeros((self._n, self._n))
        if self._hess_index:
            vals = self._hess(x)
            for (i, j), v in zip(self._hess_index, vals):
                out[i, j] = out[j, i] = v
        return out


def _codegen(exprs, index):
    """Build ``f(x) -> tuple`` evaluating ``exprs`` with common subexpressions shared."""
    lines = []
    names = {}

    def emit(node):
        key = node
        if key in names:
            return names[key]
        if isinstance(node, Const):
            code = repr(node.value)
        elif isinstance(node, Var):
            code = f"float(x[{index[node.name]}])"
        elif isinstance(node, Add):
            code = f"{emit(node.left)} + {emit(node.right)}"
        elif isinstance(node, Mul):
            code = f"{emit(node.left)} * {emit(node.right)}"
        elif isinstance(node, Pow):
            b = emit(node.base)
            code = " * ".join([b] * node.exponent) if node.exponent else "1.0"
        elif isinstance(node, Neg):
            code = f"-{emit(node.arg)}"
        else:
            code = f"_{_UNARY_NAME[type(node)]}({emit(node.arg)})"
        name = f"t{len(names)}"
        lines.append(f"    {name} = {code}")
        names[key] = name
        return name

    results = [emit(e) for e in exprs]
    body = "\n".join(lines) if lines else "    pass"
    src = f"def _f(x):\n{body}\n    return ({''.join(r + ', ' for r in results)})\n"
    scope = {"_sin": math.sin, "_cos": math.cos, "_exp": math.exp}
    exec(compile(src, "<nadmm.expr>", "exec"), scope)
    return scope["_f"]
