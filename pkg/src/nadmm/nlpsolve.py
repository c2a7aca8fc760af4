"""Newton-KKT solver for smooth equality-constrained problems.

Solves ``min_z phi(z) s.t. g(z) = 0`` by Newton's method on the KKT system

    grad phi(z) + J(z)^T mu = 0,   g(z) = 0,

with inertia-correcting regularization of the Hessian block and a
backtracking line search on the residual merit ``||stat||^2 + ||feas||^2``.
The solver is a pure function of its inputs, so independent instances may
be solved concurrently.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np
import scipy.linalg

__all__ = ["Status", "NlpInstance", "NlpSolution", "solve_eq_nlp", "kkt_residual",
           "projected_min_eig", "null_space"]

DELTA_MIN = 1e-8
DELTA_MAX = 1e12
DIVERGENCE_NORM = 1e8
ARMIJO_C1 = 1e-4
BACKTRACK = 0.5
MAX_BACKTRACKS = 60
ALPHA_MIN_REGULARIZED = 1e-4
ALPHA_MIN = 1e-12
SECOND_ORDER_TOL = 1e-6
ESCAPE_STEPS = (0.1, 0.3, 1.0)


class Status(str, enum.Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    LINALG_FAILURE = "LinAlgFailure"
    DIVERGED = "Diverged"


@dataclass(frozen=True)
class NlpInstance:
    """Oracles and starting point for one equality-constrained NLP.

    ``cons_hess(z, mu)`` returns the weighted constraint curvature
    ``sum_j mu_j * Hessian(g_j)(z)``.  ``jac`` returns the (p_c, d) Jacobian.
    """

    fun: Callable
    grad: Callable
    hess: Callable
    cons: Callable
    jac: Callable
    cons_hess: Callable
    z0: np.ndarray
    mu0: Optional[np.ndarray] = None

    @property
    def dim(self):
        return np.shape(self.z0)[0]


@dataclass(frozen=True)
class NlpSolution:
    z: np.ndarray
    mu: np.ndarray
    stat_norm: float
    feas_norm: float
    iterations: int
    status: Status
    min_projected_eig: float = np.inf
    message: str = ""

    @property
    def converged(self):
        return self.status is Status.CONVERGED

    @property
    def second_order_ok(self):
        """Projected Lagrangian Hessian is (numerically) positive semidefinite."""
        return self.min_projected_eig >= -SECOND_ORDER_TOL


def kkt_residual(inst, z, mu):
    """Return ``(||grad phi + J^T mu||, ||g||)`` at ``(z, mu)``."""
    z = np.asarray(z, dtype=float)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    J = np.asarray(inst.jac(z), dtype=float).reshape(-1, z.shape[0])
    stat = inst.grad(z) + J.T @ mu
    return float(np.linalg.norm(stat)), float(np.linalg.norm(inst.cons(z)))


def null_space(M, rtol=1e-10):
    """Orthonormal basis of null(M) from a full QR of M^T, rank tolerance rtol * ||M||."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    d = M.shape[1]
    if M.shape[0] == 0 or not np.any(M):
        return np.eye(d)
    Q, R, _ = scipy.linalg.qr(M.T, pivoting=True)
    scale = np.linalg.norm(M, 2)
    rank = int(np.sum(np.abs(np.diag(R)) > rtol * scale))
    return Q[:, rank:]


def projected_min_eig(H, M):
    """Smallest eigenvalue of Z^T H Z with Z spanning null(M); +inf if null(M) = {0}."""
    Z = null_space(M)
    if Z.shape[1] == 0:
        return np.inf
    P = Z.T @ H @ Z
    return float(np.linalg.eigvalsh(0.5 * (P + P.T))[0])


def _multiplier_estimate(g, J):
    if J.shape[0] == 0:
        return np.zeros(0)
    return np.linalg.lstsq(J.T, -g, rcond=None)[0]


def _inertia_ok(K, d, p):
    ev = np.linalg.eigvalsh(K)
    scale = max(1.0, float(np.max(np.abs(ev))))
    tol = 1e-13 * scale
    return int(np.sum(ev > tol)) == d and int(np.sum(ev < -tol)) == p


def _line_search(inst, z, mu, step, merit, slope, d, alpha_min):
    """Armijo backtracking on ||stat||^2 + ||feas||^2; None if alpha drops below alpha_min."""
    if not slope < 0.0:
        return None
    dz, dmu = step[:d], step[d:]
    alpha = 1.0
    for _ in range(MAX_BACKTRACKS):
        if alpha < alpha_min:
            return None
        z_t = z + alpha * dz
        mu_t = mu + alpha * dmu
        g_t = np.asarray(inst.grad(z_t), dtype=float)
        c_t = np.asarray(inst.cons(z_t), dtype=float).reshape(-1)
        J_t = np.asarray(inst.jac(z_t), dtype=float).reshape(-1, d)
        s_t = g_t + J_t.T @ mu_t
        merit_t = s_t @ s_t + c_t @ c_t
        if np.isfinite(merit_t) and merit_t <= merit + ARMIJO_C1 * alpha * slope:
            return z_t, mu_t, g_t, c_t, J_t
        alpha *= BACKTRACK
    return None


def solve_eq_nlp(inst, tol_stat=1e-9, tol_feas=1e-9, max_iter=200, escape_saddles=0):
    """Find a KKT point of an equality-constrained NLP.

    Parameters
    ----------
    inst : NlpInstance
    tol_stat, tol_feas : float
        Convergence thresholds on the 2-norms of Lagrangian stationarity and
        constraint violation.
    max_iter : int
        Newton iteration budget.
    escape_saddles : int
        When positive, a converged point whose projected Hessian has a
        negative eigenvalue is perturbed along that direction and re-solved,
        at most this many times; a new point is kept only if it converges
        with a lower objective.

    Returns
    -------
    NlpSolution
        ``status`` is Converged only when both thresholds hold.  The
        smallest eigenvalue of the Lagrangian Hessian projected on the
        constraint null space is reported for every outcome.
    """
    if tol_stat <= 0 or tol_feas <= 0:
        raise ValueError("tolerances must be positive")
    sol = _newton_kkt(inst, tol_stat, tol_feas, max_iter)
    for _ in range(escape_saddles):
        if not sol.converged or sol.second_order_ok:
            break
        better = _escape(inst, sol, tol_stat, tol_feas, max_iter)
        if better is None:
            break
        sol = better
    return sol


def _escape(inst, sol, tol_stat, tol_feas, max_iter):
    """Re-solve from both sides of a saddle along its negative-curvature direction."""
    z, mu = sol.z, sol.mu
    J = np.asarray(inst.jac(z), dtype=float).reshape(-1, z.shape[0])
    H = inst.hess(z) + (inst.cons_hess(z, mu) if mu.shape[0] else 0.0)
    Z = null_space(J)
    w = np.linalg.eigh(Z.T @ (0.5 * (H + H.T)) @ Z)[1][:, 0]
    v = Z @ w
    scale = max(1.0, float(np.linalg.norm(z)))
    f0 = inst.fun(z)
    best, f_best = None, f0
    # Newton is attracted by any stationary point, so short steps can fall back
    for t in ESCAPE_STEPS:
        for sign in (1.0, -1.0):
            trial = _newton_kkt(replace(inst, z0=z + sign * t * scale * v, mu0=mu),
                                tol_stat, tol_feas, max_iter)
            if trial.converged and inst.fun(trial.z) < f_best - 1e-12 * max(1.0, abs(f0)):
                best, f_best = trial, inst.fun(trial.z)
        if best is not None:
            break
    if best is None:
        return None
    iterations = sol.iterations + best.iterations
    return replace(best, iterations=iterations, message="escaped a saddle point")


def _newton_kkt(inst, tol_stat, tol_feas, max_iter):
    z = np.array(inst.z0, dtype=float).reshape(-1)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial point must be finite")
    d = z.shape[0]

    g = np.asarray(inst.grad(z), dtype=float)
    c = np.asarray(inst.cons(z), dtype=float).reshape(-1)
    J = np.asarray(inst.jac(z), dtype=float).reshape(-1, d)
    p = c.shape[0]
    if inst.mu0 is not None and np.shape(inst.mu0)[0] == p:
        mu = np.array(inst.mu0, dtype=float).reshape(-1)
    else:
        mu = _multiplier_estimate(g, J)

    def finish(status, it, message=""):
        H = inst.hess(z) + (inst.cons_hess(z, mu) if p else 0.0)
        return NlpSolution(
            z=z, mu=mu,
            stat_norm=float(np.linalg.norm(g + J.T @ mu)),
            feas_norm=float(np.linalg.norm(c)),
            iterations=it, status=status,
            min_projected_eig=projected_min_eig(H, J), message=message)

    for it in range(max_iter + 1):
        stat = g + J.T @ mu
        if np.linalg.norm(stat) <= tol_stat and np.linalg.norm(c) <= tol_feas:
            return finish(Status.CONVERGED, it)
        if it == max_iter:
            break
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > DIVERGENCE_NORM:
            return finish(Status.DIVERGED, it, "iterate norm exceeded divergence threshold")

        H = inst.hess(z) + (inst.cons_hess(z, mu) if p else 0.0)
        H = 0.5 * (H + H.T)
        K = np.zeros((d + p, d + p))
        K[:d, d:] = J.T
        K[d:, :d] = J
        delta = 0.0
        while True:
            K[:d, :d] = H + delta * np.eye(d)
            if _inertia_ok(K, d, p):
                break
            delta = DELTA_MIN if delta == 0.0 else 2.0 * delta
            if delta > DELTA_MAX:
                return finish(Status.LINALG_FAILURE, it,
                              "KKT matrix has wrong inertia at maximum regularization")
        F = np.concatenate([stat, c])
        merit = F @ F
        try:
            step = scipy.linalg.solve(K, -F, assume_a="sym")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            return finish(Status.LINALG_FAILURE, it, "singular KKT matrix")
        # slope of the merit along the step, using the unregularized Jacobian
        slope = -2.0 * merit - 2.0 * delta * (stat @ step[:d])
        trial = _line_search(inst, z, mu, step, merit, slope, d, ALPHA_MIN_REGULARIZED)
        if trial is None and delta > 0.0:
            # exact Newton direction: slope is -2 * merit, always a descent direction
            K[:d, :d] = H
            try:
                step = scipy.linalg.solve(K, -F, assume_a="sym")
            except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
                step = None
            if step is not None and np.all(np.isfinite(step)):
                trial = _line_search(inst, z, mu, step, merit, -2.0 * merit, d, ALPHA_MIN)
        if trial is None:
            # Levenberg-Marquardt step on the KKT residual
            K[:d, :d] = H
            KtF = K.T @ F
            step = -np.linalg.solve(K.T @ K + math.sqrt(merit) * np.eye(d + p), KtF)
            trial = _line_search(inst, z, mu, step, merit, 2.0 * (KtF @ step), d, 0.0)
        if trial is None:
            return finish(Status.LINALG_FAILURE, it, "no decrease along any search direction")
        z, mu, g, c, J = trial

    return finish(Status.MAX_ITER, max_iter)
