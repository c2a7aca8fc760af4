"""Problem containers and canonicalizers.

The canonical instance is

    min_x f(x)  s.t.  c(x) = 0,  A x + B y = b

with dense ``A`` (q x n), ``B`` (q x m) and ``b`` (q,).  Block-separable
forms are mapped onto it by :func:`canonicalize_block` (per-block coupling
``A_i x_i + B_i y = b_i``) and :func:`canonicalize_shared` (shared budget
``sum_i A_i x_i = b~``).  Both record the block layout on the result so the
ADMM x-step can be split into independent per-block solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg

from .expr import (Add, CompiledExpr, Const, Expr, Point, Pow, Var, evaluate, parse_expr,
                   variables_of)

__all__ = [
    "Block", "Problem", "BlockSpec", "BlockProblem", "SharedBlockSpec",
    "SharedBudgetProblem", "InequalitySpec", "ValidationReport", "ValidationError",
    "canonicalize_block", "canonicalize_shared", "add_slacks", "slack_start",
    "validate", "column_rank",
]

RANK_RTOL = 1e-10


class ValidationError(ValueError):
    """Raised when a problem fails validation; carries the report."""

    def __init__(self, report):
        self.report = report
        super().__init__("; ".join(report.errors) or "invalid problem")


@dataclass(frozen=True)
class Block:
    """Layout of one separable block inside a canonical :class:`Problem`.

    ``x_index`` are the block's columns of x (and of A), ``rows`` its rows of
    A/B/b, ``constraint_index`` its entries of c, and ``objective`` the
    block's own term f_i in the block variables.
    """

    name: str
    x_index: tuple
    rows: tuple
    constraint_index: tuple
    objective: Expr


def _sum(terms):
    terms = list(terms)
    if not terms:
        return Const(0.0)
    out = terms[0]
    for t in terms[1:]:
        out = Add(out, t)
    return out


def _matrix(a, rows=None, cols=None, name="matrix"):
    if a is None:
        a = np.zeros((rows or 0, cols or 0))
    a = np.array(a, dtype=float)
    if a.ndim == 1 and a.size == 0:
        a = a.reshape(rows or 0, cols or 0)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def _vector(v, size=None):
    if v is None:
        return np.zeros(size or 0)
    return np.array(v, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class Problem:
    """Canonical equality-constrained, linearly coupled problem.

    Attributes
    ----------
    variables, y_variables : tuple of str
        Names of x and y in declaration order.
    objective : Expr
        f over the x variables.
    constraints : tuple of Expr
        Components c_j over the x variables.
    A, B, b : ndarray
        Coupling data, shapes (q, n), (q, m), (q,).
    blocks : tuple of Block
        Separable layout, empty when the problem is treated as one block.
    x0 : ndarray or None
        Optional initial guess for x shipped with the problem.
    """

    variables: tuple
    y_variables: tuple
    objective: Expr
    constraints: tuple
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    blocks: tuple = ()
    x0: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "variables", tuple(self.variables))
        set_(self, "y_variables", tuple(self.y_variables))
        set_(self, "objective", parse_expr(self.objective))
        set_(self, "constraints", tuple(parse_expr(c) for c in self.constraints))
        A = _matrix(self.A, 0, len(self.variables), "A")
        B = _matrix(self.B, A.shape[0], len(self.y_variables), "B")
        b = _vector(self.b, A.shape[0])
        for arr in (A, B, b):
            arr.setflags(write=False)
        set_(self, "A", A)
        set_(self, "B", B)
        set_(self, "b", b)
        set_(self, "blocks", tuple(self.blocks))
        if self.x0 is not None:
            x0 = _vector(self.x0)
            x0.setflags(write=False)
            set_(self, "x0", x0)

    @property
    def n(self):
        return len(self.variables)

    @property
    def m(self):
        return len(self.y_variables)

    @property
    def p(self):
        return len(self.constraints)

    @property
    def q(self):
        return self.b.shape[0]

    @cached_property
    def f(self):
        """Compiled objective over x."""
        return CompiledExpr(self.objective, self.variables)

    @cached_property
    def c(self):
        """Compiled constraint components over x."""
        return tuple(CompiledExpr(ci, self.variables) for ci in self.constraints)

    @cached_property
    def block_functions(self):
        """Per block: compiled (f_i, [c_j for j in the block]) over the block's variables."""
        out = []
        for blk in self.blocks:
            names = [self.variables[i] for i in blk.x_index]
            out.append((CompiledExpr(blk.objective, names),
                        tuple(CompiledExpr(self.constraints[j], names)
                              for j in blk.constraint_index)))
        return tuple(out)

    @cached_property
    def b_qr(self):
        """Thin QR factors (Q, R) of B."""
        if self.m == 0:
            return np.zeros((self.q, 0)), np.zeros((0, 0))
        return scipy.linalg.qr(self.B, mode="economic")

    def cons(self, x):
        return np.array([ci.value(x) for ci in self.c])

    def jac(self, x):
        """Constraint Jacobian, shape (p, n); its transpose is grad c(x)."""
        if not self.c:
            return np.zeros((0, self.n))
        return np.array([ci.gradient(x) for ci in self.c])

    def cons_hess(self, x, mu):
        """Sum_j mu_j * Hessian(c_j)(x)."""
        out = np.zeros((self.n, self.n))
        for mj, ci in zip(mu, self.c):
            if mj != 0.0:
                out += mj * ci.hessian(x)
        return out

    def hess_lagrangian(self, x, mu):
        """H_xx(x, mu) = Hessian f + sum_j mu_j Hessian c_j."""
        return self.f.hessian(x) + self.cons_hess(x, mu)

    def coupling_residual(self, x, y):
        return self.A @ x + self.B @ y - self.b

    def with_blocks(self, blocks):
        return replace(self, blocks=tuple(blocks))


# ---------------------------------------------------------------------------
# Block forms

@dataclass(frozen=True)
class BlockSpec:
    """One block of a per-block coupled problem: f_i, c_i, A_i, B_i, b_i."""

    variables: tuple
    objective: Expr
    A: np.ndarray
    B: np.ndarray
    b: np.ndarray
    constraints: tuple = ()
    name: str = ""


@dataclass(frozen=True)
class BlockProblem:
    blocks: tuple
    y_variables: tuple = ()
    name: str = ""


@dataclass(frozen=True)
class SharedBlockSpec:
    """One block of a shared-budget problem: f_i, c_i, A_i."""

    variables: tuple
    objective: Expr
    A: np.ndarray
    constraints: tuple = ()
    name: str = ""


@dataclass(frozen=True)
class SharedBudgetProblem:
    blocks: tuple
    b: np.ndarray
    name: str = ""


def _block_exprs(spec):
    return parse_expr(spec.objective), tuple(parse_expr(c) for c in spec.constraints)


def _check_unique(names):
    seen = set()
    for v in names:
        if v in seen:
            raise ValueError(f"variable {v!r} declared in more than one block")
        seen.add(v)


def canonicalize_block(bp):
    """Map ``A_i x_i + B_i y = b_i`` blocks onto the canonical form.

    x is the concatenation of block variables, f the sum of block
    objectives, c the stacked block constraints, A block diagonal, B the
    vertical stack of the B_i and b the concatenation of the b_i.
    """
    if not bp.blocks:
        raise ValueError("block problem has no blocks")
    Bs = [_matrix(blk.B, name="B_i") for blk in bp.blocks]
    widths = {B.shape[1] for B in Bs}
    if len(widths) != 1:
        raise ValueError(f"blocks disagree on the y dimension m: {sorted(widths)}")
    m = widths.pop()
    y_names = tuple(bp.y_variables) or tuple(f"y{j + 1}" for j in range(m))
    if len(y_names) != m:
        raise ValueError(f"{len(y_names)} y variable names for m = {m}")

    variables, constraints, blocks = [], [], []
    A_parts, b_parts = [], []
    row = 0
    for i, blk in enumerate(bp.blocks):
        f_i, c_i = _block_exprs(blk)
        A_i = _matrix(blk.A, name="A_i")
        b_i = _vector(blk.b)
        n_i = len(blk.variables)
        if A_i.shape != (Bs[i].shape[0], n_i) or b_i.shape[0] != A_i.shape[0]:
            raise ValueError(
                f"block {i}: A_i {A_i.shape}, B_i {Bs[i].shape}, b_i {b_i.shape} "
                f"inconsistent with {n_i} variables")
        col = len(variables)
        blocks.append(Block(
            name=blk.name or f"block{i + 1}",
            x_index=tuple(range(col, col + n_i)),
            rows=tuple(range(row, row + A_i.shape[0])),
            constraint_index=tuple(range(len(constraints), len(constraints) + len(c_i))),
            objective=f_i,
        ))
        variables.extend(blk.variables)
        constraints.extend(c_i)
        A_parts.append(A_i)
        b_parts.append(b_i)
        row += A_i.shape[0]
    _check_unique(list(variables) + list(y_names))
    return Problem(
        variables=variables,
        y_variables=y_names,
        objective=_sum(blk.objective for blk in blocks),
        constraints=constraints,
        A=scipy.linalg.block_diag(*A_parts) if A_parts else np.zeros((0, 0)),
        B=np.vstack(Bs),
        b=np.concatenate(b_parts),
        blocks=blocks,
        name=bp.name,
    )


def canonicalize_shared(sp):
    """Map ``sum_i A_i x_i = b~`` onto the canonical form.

    Each block gets its own copy y_i of the budget share, giving the rows
    ``A_i x_i - y_i = 0`` followed by ``sum_i y_i = b~``::

        A = [A_1        ]   B = [-I        ]   b = [0 ]
            [    ...    ]       [    ...   ]       [..]
            [        A_N]       [       -I ]       [0 ]
            [0  ...   0 ]       [ I ... I  ]       [b~]
    """
    if not sp.blocks:
        raise ValueError("shared-budget problem has no blocks")
    b_tilde = _vector(sp.b)
    qt = b_tilde.shape[0]
    As = [_matrix(blk.A, name="A_i") for blk in sp.blocks]
    rows = {A.shape[0] for A in As}
    if rows != {qt}:
        raise ValueError(f"blocks must all have {qt} coupling rows, got {sorted(rows)}")
    N = len(sp.blocks)
    eye = np.eye(qt)
    B = np.zeros(((N + 1) * qt, N * qt))
    for i in range(N):
        B[i * qt:(i + 1) * qt, i * qt:(i + 1) * qt] = -eye
        B[N * qt:, i * qt:(i + 1) * qt] = eye
    specs = []
    for i, (blk, A_i) in enumerate(zip(sp.blocks, As)):
        if A_i.shape[1] != len(blk.variables):
            raise ValueError(f"block {i}: A_i has {A_i.shape[1]} columns for "
                             f"{len(blk.variables)} variables")
        specs.append(BlockSpec(
            variables=blk.variables, objective=blk.objective, constraints=blk.constraints,
            A=A_i, B=np.zeros((qt, 0)), b=np.zeros(qt), name=blk.name))
    y_names = tuple(f"y{i + 1}_{j + 1}" for i in range(N) for j in range(qt))
    inner = canonicalize_block(BlockProblem(blocks=tuple(specs), name=sp.name))
    A = np.vstack([inner.A, np.zeros((qt, inner.n))])
    b = np.concatenate([np.zeros(N * qt), b_tilde])
    _check_unique(list(inner.variables) + list(y_names))
    return replace(inner, y_variables=y_names, A=A, B=B, b=b)


# ---------------------------------------------------------------------------
# Inequalities

@dataclass(frozen=True)
class InequalitySpec:
    """Constraints h_j(x) <= 0, one expression per entry."""

    expressions: tuple = ()
    slack_names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "expressions", tuple(parse_expr(h) for h in self.expressions))
        object.__setattr__(self, "slack_names", tuple(self.slack_names))


def slack_start(ineq, point):
    """Initial slack values max(sqrt(max(-h_j(x0), 0)), 1e-3)."""
    return np.array([max(math.sqrt(max(-evaluate(h, point), 0.0)), 1e-3)
                     for h in ineq.expressions])


def add_slacks(prob, ineq):
    """Rewrite each h_j(x) <= 0 as h_j(x) + s_j^2 = 0 with a new free variable s_j.

    A gains zero columns for the slacks and the objective is unchanged.  A
    slack whose inequality touches the variables of a single block joins
    that block; otherwise the block layout is dropped.  When the problem
    carries an initial guess it is extended with :func:`slack_start`.
    """
    if not ineq.expressions:
        return prob
    k = len(ineq.expressions)
    names = ineq.slack_names or tuple(f"s{j + 1}" for j in range(k))
    if len(names) != k:
        raise ValueError(f"{len(names)} slack names for {k} inequalities")
    taken = set(prob.variables) | set(prob.y_variables)
    clash = [s for s in names if s in taken] + [s for s in set(names) if names.count(s) > 1]
    if clash:
        raise ValueError(f"slack name collision: {sorted(set(clash))}")
    known = set(prob.variables)
    for h in ineq.expressions:
        undeclared = variables_of(h) - known
        if undeclared:
            raise ValueError(f"inequality references undeclared variables {sorted(undeclared)}")

    new_cons = [Add(h, Pow(Var(s), 2)) for h, s in zip(ineq.expressions, names)]
    n, p = prob.n, prob.p
    blocks = list(prob.blocks)
    if blocks:
        owner = {}
        for bi, blk in enumerate(blocks):
            for col in blk.x_index:
                owner[prob.variables[col]] = bi
        extra = {bi: ([], []) for bi in range(len(blocks))}
        for j, h in enumerate(ineq.expressions):
            homes = {owner[v] for v in variables_of(h)}
            if len(homes) != 1:
                blocks = []
                break
            bi = homes.pop()
            extra[bi][0].append(n + j)
            extra[bi][1].append(p + j)
        else:
            blocks = [replace(blk, x_index=blk.x_index + tuple(extra[bi][0]),
                              constraint_index=blk.constraint_index + tuple(extra[bi][1]))
                      for bi, blk in enumerate(blocks)]
    x0 = None
    if prob.x0 is not None:
        x0 = np.concatenate([prob.x0, slack_start(ineq, Point(prob.variables, prob.x0))])
    return replace(
        prob,
        variables=prob.variables + tuple(names),
        constraints=prob.constraints + tuple(new_cons),
        A=np.hstack([prob.A, np.zeros((prob.q, k))]),
        blocks=tuple(blocks),
        x0=x0,
    )


# ---------------------------------------------------------------------------
# Validation

def column_rank(M, rtol=RANK_RTOL):
    """Numerical column rank via column-pivoted QR, tolerance rtol * ||M||_2."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0
    R = scipy.linalg.qr(M, mode="r", pivoting=True)[0]
    scale = np.linalg.norm(M, 2)
    if scale == 0.0:
        return 0
    d = np.abs(np.diag(R))
    return int(np.sum(d > rtol * scale))


@dataclass
class ValidationReport:
    ok: bool = True
    errors: list = field(default_factory=list)
    dimensions_ok: bool = True
    b_rank: int = 0
    b_full_column_rank: bool = True
    undeclared: list = field(default_factory=list)

    def fail(self, message):
        self.ok = False
        self.errors.append(message)

    def to_dict(self):
        return {
            "ok": self.ok, "errors": list(self.errors), "dimensions_ok": self.dimensions_ok,
            "b_rank": self.b_rank, "b_full_column_rank": self.b_full_column_rank,
            "undeclared": list(self.undeclared),
        }


def validate(prob):
    """Check dimensions, declared variables and full column rank of B.

    Never raises; failures are collected on the returned report.
    """
    rep = ValidationReport()
    n, m = len(prob.variables), len(prob.y_variables)
    A, B, b = prob.A, prob.B, prob.b
    q = b.shape[0]
    if A.shape != (q, n):
        rep.dimensions_ok = False
        rep.fail(f"A has shape {A.shape}, expected ({q}, {n}) from b and variables")
    if B.shape != (q, m):
        rep.dimensions_ok = False
        rep.fail(f"B has shape {B.shape}, expected ({q}, {m}) from b and y_variables")
    for label, arr in (("A", A), ("B", B), ("b", b)):
        if not np.all(np.isfinite(arr)):
            rep.fail(f"{label} has non-finite entries")
    names = list(prob.variables) + list(prob.y_variables)
    dup = sorted({v for v in names if names.count(v) > 1})
    if dup:
        rep.fail(f"duplicate variable names {dup}")
    declared = set(prob.variables)
    used = set(variables_of(prob.objective))
    for c in prob.constraints:
        used |= variables_of(c)
    rep.undeclared = sorted(used - declared)
    if rep.undeclared:
        rep.fail(f"undeclared variables referenced: {rep.undeclared}")
    if rep.dimensions_ok:
        rep.b_rank = column_rank(B)
        rep.b_full_column_rank = rep.b_rank == m
        if not rep.b_full_column_rank:
            rep.fail(f"B must have full column rank: rank {rep.b_rank} < m = {m}")
        for blk in prob.blocks:
            others = [j for j in range(n) if j not in set(blk.x_index)]
            if np.any(A[np.ix_(blk.rows, others)] != 0.0):
                rep.fail(f"block {blk.name!r}: A couples rows to variables outside the block")
        if prob.blocks:
            covered = {r for blk in prob.blocks for r in blk.rows}
            free = [r for r in range(q) if r not in covered]
            if free and np.any(A[free] != 0.0):
                rep.fail("rows outside every block have nonzero A entries")
    if prob.x0 is not None and prob.x0.shape != (n,):
        rep.fail(f"x0 has {prob.x0.shape[0]} entries for {n} variables")
    return rep
