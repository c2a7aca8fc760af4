"""ADMM for nonconvex, equality-constrained, linearly coupled problems.

Each iteration

1. finds a local minimizer x^{k+1} (with multipliers mu^{k+1}) of

       f(x) + lam^T (A x + B y^k - b) + rho/2 ||A x + B y^k - b||^2   s.t. c(x) = 0,

   warm-started at the previous x,
2. sets y^{k+1} to the least-squares solution of A x^{k+1} + B y = b,
3. sets lam^{k+1} = lam^k + rho q^{k+1} with q^{k+1} = A x^{k+1} + B y^{k+1} - b,
4. forms the dual residual r^{k+1} = rho A^T B (y^{k+1} - y^k),

and stops once ||q|| <= eta_p and ||r|| <= eta_d.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .model import ValidationError, validate
from .nlpsolve import NlpInstance, Status, solve_eq_nlp

__all__ = [
    "AdmmConfig", "Iterate", "Trace", "SolveReport", "AdmmError", "SubproblemFailure",
    "DivergenceError", "assemble_subproblem", "assemble_block_subproblem",
    "y_update", "lambda_update", "residuals", "initial_iterate", "step", "run",
    "project_null_bt",
]

log = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e8


class AdmmError(RuntimeError):
    """Base class for ADMM run failures; ``trace`` holds the iterates so far."""

    def __init__(self, message, k=None, trace=None):
        self.k = k
        self.trace = trace
        super().__init__(message)


class SubproblemFailure(AdmmError):
    """The x-subproblem solver did not converge at iteration ``k``."""

    def __init__(self, k, status, message="", trace=None):
        self.status = status
        text = f"subproblem failed at iteration {k}: {status.value}"
        if message:
            text += f" ({message})"
        super().__init__(text, k=k, trace=trace)


class DivergenceError(AdmmError):
    pass


def project_null_bt(B, lam):
    """Project ``lam`` onto null(B^T); returns ``(projected, distance)``."""
    lam = np.asarray(lam, dtype=float)
    if B.shape[1] == 0:
        return lam.copy(), 0.0
    Q = scipy.linalg.qr(B, mode="economic")[0]
    correction = Q @ (Q.T @ lam)
    return lam - correction, float(np.linalg.norm(correction))


@dataclass(frozen=True)
class AdmmConfig:
    """Run parameters.

    ``x0`` seeds the first subproblem solve (zeros, or the problem's own
    ``x0``, when omitted).  With ``warm_start="previous"`` later solves start
    from the previous x; ``"fixed"`` restarts every solve from ``x0``.
    ``lambda0`` is projected onto null(B^T) at :func:`initial_iterate`.
    ``escape_saddles`` bounds the inner solver's retries when a subproblem
    solve lands on a saddle (0 disables them).
    """

    rho: float
    eta_p: float = 1e-8
    eta_d: float = 1e-8
    max_iter: int = 1000
    y0: np.ndarray | None = None
    lambda0: np.ndarray | None = None
    x0: np.ndarray | None = None
    warm_start: str = "previous"
    parallel_blocks: bool = False
    inner_tol: float | None = None
    inner_max_iter: int = 200
    escape_saddles: int = 3

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not (self.eta_p > 0 and self.eta_d > 0):
            raise ValueError("eta_p and eta_d must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.escape_saddles < 0:
            raise ValueError("escape_saddles must be non-negative")
        if self.warm_start not in ("previous", "fixed"):
            raise ValueError(f"unknown warm_start policy {self.warm_start!r}")

    @property
    def subproblem_tol(self):
        """Inner stationarity/feasibility tolerance, min(eta_p, eta_d) / 100 by default."""
        if self.inner_tol is not None:
            return self.inner_tol
        return min(self.eta_p, self.eta_d) / 100.0


@dataclass(frozen=True)
class Iterate:
    """State after iteration ``k`` (k = 0 is the initial state)."""

    k: int
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    q: np.ndarray
    r: np.ndarray
    norm_q: float = np.nan
    norm_r: float = np.nan
    inner_status: str = ""
    inner_iterations: int = 0
    second_order_ok: bool = True
    dual_identity_residual: float = np.nan


@dataclass
class Trace:
    """Iterates k = 1, 2, ... of one run plus the initial state and wall times."""

    rho: float
    initial: Iterate
    iterates: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def __len__(self):
        return len(self.iterates)

    def __iter__(self):
        return iter(self.iterates)

    def __getitem__(self, i):
        return self.iterates[i]

    @property
    def saddle_flags(self):
        return [it.k for it in self.iterates if not it.second_order_ok]


@dataclass(frozen=True)
class SolveReport:
    status: str
    iterations: int
    final: Iterate
    rho: float
    eta_p: float
    eta_d: float
    inner_tol: float
    lambda0_projection_distance: float
    saddle_iterations: tuple = ()

    @property
    def x(self):
        return self.final.x

    @property
    def y(self):
        return self.final.y

    @property
    def mu(self):
        return self.final.mu

    @property
    def lam(self):
        return self.final.lam

    @property
    def solved(self):
        return self.status == "Solved"


# ---------------------------------------------------------------------------
# Building blocks

def assemble_subproblem(prob, y_k, lam_k, rho, x_start=None, mu_start=None):
    """NLP instance for the x-step at (y^k, lam^k) over all of x."""
    A, shift = prob.A, prob.B @ np.asarray(y_k, dtype=float) - prob.b
    lam_k = np.asarray(lam_k, dtype=float)
    AtA = rho * (A.T @ A)
    f = prob.f

    def fun(x):
        v = A @ x + shift
        return f.value(x) + lam_k @ v + 0.5 * rho * (v @ v)

    def grad(x):
        return f.gradient(x) + A.T @ (lam_k + rho * (A @ x + shift))

    def hess(x):
        return f.hessian(x) + AtA

    z0 = np.zeros(prob.n) if x_start is None else np.asarray(x_start, dtype=float)
    return NlpInstance(fun=fun, grad=grad, hess=hess, cons=prob.cons, jac=prob.jac,
                       cons_hess=prob.cons_hess, z0=z0, mu0=mu_start)


def assemble_block_subproblem(prob, blk, y_k, lam_k, rho, x_start=None, mu_start=None):
    """NLP instance for one block of the x-step; variables are the block's x."""
    cols, rows = list(blk.x_index), list(blk.rows)
    A = prob.A[np.ix_(rows, cols)]
    shift = (prob.B @ np.asarray(y_k, dtype=float) - prob.b)[rows]
    lam_b = np.asarray(lam_k, dtype=float)[rows]
    AtA = rho * (A.T @ A)
    f, cs = prob.block_functions[prob.blocks.index(blk)]
    nb = len(cols)

    def fun(x):
        v = A @ x + shift
        return f.value(x) + lam_b @ v + 0.5 * rho * (v @ v)

    def grad(x):
        return f.gradient(x) + A.T @ (lam_b + rho * (A @ x + shift))

    def hess(x):
        return f.hessian(x) + AtA

    def cons(x):
        return np.array([c.value(x) for c in cs])

    def jac(x):
        if not cs:
            return np.zeros((0, nb))
        return np.array([c.gradient(x) for c in cs])

    def cons_hess(x, mu):
        out = np.zeros((nb, nb))
        for mj, c in zip(mu, cs):
            if mj != 0.0:
                out += mj * c.hessian(x)
        return out

    z0 = np.zeros(nb) if x_start is None else np.asarray(x_start, dtype=float)
    return NlpInstance(fun=fun, grad=grad, hess=hess, cons=cons, jac=jac,
                       cons_hess=cons_hess, z0=z0, mu0=mu_start)


def y_update(prob, x_next):
    """Least-squares y minimizing ||A x_next + B y - b||, via QR of B."""
    if prob.m == 0:
        return np.zeros(0)
    Q, R = prob.b_qr
    rhs = Q.T @ (prob.b - prob.A @ np.asarray(x_next, dtype=float))
    if np.any(np.abs(np.diag(R)) <= 1e-10 * np.abs(R).max()):
        raise np.linalg.LinAlgError("B does not have full column rank")
    return scipy.linalg.solve_triangular(R, rhs)


def lambda_update(lam_k, rho, q_next):
    return np.asarray(lam_k, dtype=float) + rho * np.asarray(q_next, dtype=float)


def residuals(prob, x_next, y_next, y_prev, rho):
    """Primal residual q = A x + B y - b and dual residual r = rho A^T B (y - y_prev)."""
    q = prob.A @ x_next + prob.B @ y_next - prob.b
    r = rho * (prob.A.T @ (prob.B @ (np.asarray(y_next) - np.asarray(y_prev))))
    return q, r


def initial_iterate(prob, config):
    """State k = 0 from the config; returns ``(iterate, lambda0 projection distance)``."""
    y0 = np.zeros(prob.m) if config.y0 is None else np.array(config.y0, dtype=float)
    lam0 = np.zeros(prob.q) if config.lambda0 is None else np.array(config.lambda0, dtype=float)
    if y0.shape != (prob.m,):
        raise ValueError(f"y0 has shape {y0.shape}, expected ({prob.m},)")
    if lam0.shape != (prob.q,):
        raise ValueError(f"lambda0 has shape {lam0.shape}, expected ({prob.q},)")
    lam0, dist = project_null_bt(prob.B, lam0)
    if dist > 0:
        log.info("lambda0 projected onto null(B^T), distance %.3e", dist)
    if config.x0 is not None:
        x0 = np.array(config.x0, dtype=float)
    elif prob.x0 is not None:
        x0 = np.array(prob.x0, dtype=float)
    else:
        x0 = np.zeros(prob.n)
    if x0.shape != (prob.n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({prob.n},)")
    state = Iterate(k=0, x=x0, y=y0, mu=np.full(prob.p, np.nan), lam=lam0,
                    q=np.full(prob.q, np.nan), r=np.full(prob.n, np.nan))
    return state, dist


def _solve_x(prob, config, state, x_start):
    tol = config.subproblem_tol
    mu_start = state.mu if state.k > 0 and config.warm_start == "previous" else None
    if not prob.blocks:
        inst = assemble_subproblem(prob, state.y, state.lam, config.rho, x_start, mu_start)
        sol = solve_eq_nlp(inst, tol, tol, config.inner_max_iter, config.escape_saddles)
        return [sol], [(list(range(prob.n)), list(range(prob.p)))]

    jobs = []
    for blk in prob.blocks:
        cols, cidx = list(blk.x_index), list(blk.constraint_index)
        mu_b = None if mu_start is None else mu_start[cidx]
        inst = assemble_block_subproblem(prob, blk, state.y, state.lam, config.rho,
                                         x_start[cols], mu_b)
        jobs.append((inst, (cols, cidx)))

    def solve(inst):
        return solve_eq_nlp(inst, tol, tol, config.inner_max_iter, config.escape_saddles)

    if config.parallel_blocks and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            sols = list(pool.map(solve, [inst for inst, _ in jobs]))
    else:
        sols = [solve(inst) for inst, _ in jobs]
    return sols, [layout for _, layout in jobs]


def step(prob, config, state):
    """One ADMM iteration from ``state``; returns the iterate k + 1.

    Raises
    ------
    SubproblemFailure
        When the x-subproblem solve does not converge.
    """
    k = state.k + 1
    if config.warm_start == "previous" or state.k == 0:
        x_start = state.x
    else:
        x_start = initial_iterate(prob, config)[0].x

    sols, layouts = _solve_x(prob, config, state, x_start)
    x = np.zeros(prob.n)
    mu = np.zeros(prob.p)
    inner_iters, second_order = 0, True
    for sol, (cols, cidx) in zip(sols, layouts):
        if sol.status is not Status.CONVERGED:
            raise SubproblemFailure(k, sol.status, sol.message)
        x[cols] = sol.z
        mu[cidx] = sol.mu
        inner_iters = max(inner_iters, sol.iterations)
        second_order = second_order and sol.second_order_ok
    if not second_order:
        log.warning("iteration %d: subproblem solution fails the second-order check", k)

    y = y_update(prob, x)
    q, r = residuals(prob, x, y, state.y, config.rho)
    lam = lambda_update(state.lam, config.rho, q)
    identity = prob.f.gradient(x) + prob.jac(x).T @ mu + prob.A.T @ lam - r
    return Iterate(
        k=k, x=x, y=y, mu=mu, lam=lam, q=q, r=r,
        norm_q=float(np.linalg.norm(q)), norm_r=float(np.linalg.norm(r)),
        inner_status=Status.CONVERGED.value, inner_iterations=inner_iters,
        second_order_ok=second_order,
        dual_identity_residual=float(np.linalg.norm(identity)),
    )


def run(prob, config):
    """Iterate until both residual tolerances hold or ``max_iter`` is reached.

    Returns
    -------
    report : SolveReport
        ``status`` is ``"Solved"`` or ``"IterLimit"``.
    trace : Trace

    Raises
    ------
    ValidationError
        If the problem fails :func:`nadmm.model.validate` (e.g. B rank deficient).
    SubproblemFailure, DivergenceError
        On solver failure; the exception's ``trace`` holds the partial run.
    """
    rep = validate(prob)
    if not rep.ok:
        raise ValidationError(rep)
    state, dist = initial_iterate(prob, config)
    trace = Trace(rho=config.rho, initial=state)
    status = "IterLimit"
    for _ in range(config.max_iter):
        t0 = time.perf_counter()
        try:
            state = step(prob, config, state)
        except AdmmError as exc:
            exc.trace = trace
            raise
        trace.iterates.append(state)
        trace.wall_times.append(time.perf_counter() - t0)
        size = np.linalg.norm(np.concatenate([state.x, state.y, state.lam]))
        if not np.isfinite(size) or size > DIVERGENCE_NORM:
            raise DivergenceError(f"iterate norm {size:.3e} exceeds {DIVERGENCE_NORM:.0e} "
                                  f"at iteration {state.k}", k=state.k, trace=trace)
        if state.norm_q <= config.eta_p and state.norm_r <= config.eta_d:
            status = "Solved"
            break
    report = SolveReport(
        status=status, iterations=len(trace), final=state, rho=config.rho,
        eta_p=config.eta_p, eta_d=config.eta_d, inner_tol=config.subproblem_tol,
        lambda0_projection_distance=dist, saddle_iterations=tuple(trace.saddle_flags),
    )
    return report, trace
