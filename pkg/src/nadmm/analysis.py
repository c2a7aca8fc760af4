"""Runtime diagnostics for ADMM iterates and solutions.

Covers first-order (KKT) residuals, LICQ and second-order sufficiency
checks, the critical penalty above which a quadratic penalty makes a
Hessian positive definite on a null space, the Lyapunov function
``V = (1/rho)||lam - lam*||^2 + rho||B(y - y*)||^2`` with its per-step
decrease bound, the scaled rho-norm, convergence ratios in that norm, and a
multistart oracle for reference KKT points.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import column_rank
from .nlpsolve import NlpInstance, Status, null_space, projected_min_eig, solve_eq_nlp

__all__ = [
    "KktReport", "RegularityReport", "SoscResult", "LyapunovSeries", "RateSeries", "KktPoint",
    "HypothesisError", "check_kkt", "check_licq", "check_sosc", "critical_rho",
    "problem_critical_rho", "regularity", "lyapunov", "rho_norm", "verify_decrease_bound",
    "convergence_rate", "reference_solution", "nearest_reference", "PD_TOL",
]

PD_TOL = 1e-9
RHO_CAP = 1e12


class HypothesisError(ValueError):
    """H is not positive definite on null([C; D]); ``direction`` is a witness."""

    def __init__(self, message, direction, curvature):
        self.direction = direction
        self.curvature = curvature
        super().__init__(message)


@dataclass(frozen=True)
class KktReport:
    stationarity_x: float
    stationarity_y: float
    constraint: float
    coupling: float

    def max(self):
        return max(self.stationarity_x, self.stationarity_y, self.constraint, self.coupling)

    def to_dict(self):
        return {"stationarity_x": self.stationarity_x, "stationarity_y": self.stationarity_y,
                "constraint": self.constraint, "coupling": self.coupling}


@dataclass(frozen=True)
class SoscResult:
    overall_ok: bool
    min_projected_eig: float
    subproblem_ok: bool | None = None
    subproblem_min_eig: float | None = None


@dataclass(frozen=True)
class RegularityReport:
    licq_ok: bool
    rank: int
    expected_rank: int
    min_projected_eig: float
    sosc_ok: bool
    critical_rho: float
    rho: float | None = None
    subproblem_sosc_ok: bool | None = None
    subproblem_min_eig: float | None = None

    def to_dict(self):
        return dict(self.__dict__)


def _vec(v, size=None):
    out = np.asarray(v, dtype=float).reshape(-1)
    if size is not None and out.shape[0] != size:
        raise ValueError(f"expected {size} entries, got {out.shape[0]}")
    return out


def check_kkt(prob, x, y, mu, lam):
    """Norms of the four first-order conditions of the canonical problem.

    stationarity_x = ||grad f + grad c mu + A^T lam||, stationarity_y = ||B^T lam||,
    constraint = ||c(x)||, coupling = ||A x + B y - b||.
    """
    x, y = _vec(x, prob.n), _vec(y, prob.m)
    mu, lam = _vec(mu, prob.p), _vec(lam, prob.q)
    sx = prob.f.gradient(x) + prob.jac(x).T @ mu + prob.A.T @ lam
    return KktReport(
        stationarity_x=float(np.linalg.norm(sx)),
        stationarity_y=float(np.linalg.norm(prob.B.T @ lam)),
        constraint=float(np.linalg.norm(prob.cons(x))),
        coupling=float(np.linalg.norm(prob.coupling_residual(x, y))),
    )


def constraint_matrix(prob, x):
    """C = [[grad c(x)^T, 0], [A, B]], shape (p + q, n + m)."""
    J = prob.jac(_vec(x, prob.n))
    top = np.hstack([J, np.zeros((prob.p, prob.m))])
    return np.vstack([top, np.hstack([prob.A, prob.B])])


def check_licq(prob, x):
    """Return ``(ok, rank)``: whether the rows of C are linearly independent."""
    C = constraint_matrix(prob, x)
    rank = column_rank(C.T)
    return rank == C.shape[0], rank


def check_sosc(prob, x, mu, rho=None):
    """Second-order sufficiency at (x, mu).

    The overall test projects blkdiag(H_xx, 0) onto null(C) and requires the
    smallest eigenvalue to exceed ``PD_TOL``.  With ``rho`` the subproblem
    test projects ``H_xx + rho A^T A`` onto null(grad c^T) as well; an empty
    null space passes vacuously with eigenvalue +inf.
    """
    x, mu = _vec(x, prob.n), _vec(mu, prob.p)
    Hxx = prob.hess_lagrangian(x, mu)
    n, m = prob.n, prob.m
    H = np.zeros((n + m, n + m))
    H[:n, :n] = Hxx
    eig = projected_min_eig(H, constraint_matrix(prob, x))
    sub_ok = sub_eig = None
    if rho is not None:
        sub_eig = projected_min_eig(Hxx + rho * prob.A.T @ prob.A, prob.jac(x))
        sub_ok = bool(sub_eig > PD_TOL)
    return SoscResult(bool(eig > PD_TOL), eig, sub_ok, sub_eig)


def _min_eig(M):
    if M.shape[0] == 0:
        return math.inf
    return float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])


def critical_rho(H, C_keep, D_pen, rtol=1e-9):
    """Smallest rho* >= 0 with H + rho D^T D positive definite on null(C_keep) for rho > rho*.

    Parameters
    ----------
    H : (d, d) symmetric array
    C_keep : (p, d) array, possibly with zero rows
    D_pen : (p', d) array
    rtol : float
        Relative width of the final bisection bracket.

    Returns
    -------
    float
        ``rho*`` located by bisection, or ``inf`` (with a warning) if no
        bracket exists below 1e12.

    Raises
    ------
    HypothesisError
        If H is not positive definite on null([C_keep; D_pen]).
    """
    H = np.atleast_2d(np.asarray(H, dtype=float))
    d = H.shape[0]
    C = np.asarray(C_keep, dtype=float).reshape(-1, d)
    D = np.asarray(D_pen, dtype=float).reshape(-1, d)

    W = null_space(np.vstack([C, D]))
    if W.shape[1]:
        ev, vecs = np.linalg.eigh(W.T @ H @ W)
        if ev[0] <= PD_TOL:
            direction = W @ vecs[:, 0]
            raise HypothesisError(
                f"H is not positive definite on null([C; D]): curvature {ev[0]:.3e} "
                f"along {np.array2string(direction, precision=4)}", direction, float(ev[0]))

    Z = null_space(C)
    if Z.shape[1] == 0:
        return 0.0
    Hz = Z.T @ H @ Z
    Dz = Z.T @ D.T @ D @ Z

    def lam_min(rho):
        return _min_eig(Hz + rho * Dz)

    if lam_min(0.0) > 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while lam_min(hi) <= 0.0:
        lo, hi = hi, hi * 10.0
        if hi > RHO_CAP:
            warnings.warn("critical rho exceeds 1e12; returning inf", RuntimeWarning)
            return math.inf
    for _ in range(200):
        if hi - lo <= max(rtol * hi, 1e-15):
            break
        mid = 0.5 * (lo + hi)
        if lam_min(mid) > 0.0:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def problem_critical_rho(prob, x, mu):
    """Critical rho for the problem data at (x, mu).

    Uses H = blkdiag(H_xx, 0), C_keep = [grad c^T, 0] and D_pen = [A, B]:
    above the returned value the subproblem Lagrangian Hessian
    ``H_xx + rho A^T A`` is positive definite on null(grad c^T).
    """
    x, mu = _vec(x, prob.n), _vec(mu, prob.p)
    n, m = prob.n, prob.m
    H = np.zeros((n + m, n + m))
    H[:n, :n] = prob.hess_lagrangian(x, mu)
    C_keep = np.hstack([prob.jac(x), np.zeros((prob.p, m))])
    D_pen = np.hstack([prob.A, prob.B])
    return critical_rho(H, C_keep, D_pen)


def regularity(prob, x, mu, rho=None):
    """Combined LICQ / SOSC / critical-rho report at (x, mu)."""
    ok, rank = check_licq(prob, x)
    sosc = check_sosc(prob, x, mu, rho)
    try:
        crho = problem_critical_rho(prob, x, mu) if sosc.overall_ok else math.inf
    except HypothesisError:
        crho = math.inf
    return RegularityReport(
        licq_ok=ok, rank=rank, expected_rank=prob.p + prob.q,
        min_projected_eig=sosc.min_projected_eig, sosc_ok=sosc.overall_ok,
        critical_rho=crho, rho=rho, subproblem_sosc_ok=sosc.subproblem_ok,
        subproblem_min_eig=sosc.subproblem_min_eig)


# ---------------------------------------------------------------------------
# Lyapunov function and rho-norm

def rho_norm(y, lam, B, rho):
    """(rho ||B y||^2 + ||lam||^2 / rho)^(1/2)."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    By = np.asarray(B, dtype=float) @ np.asarray(y, dtype=float)
    lam = np.asarray(lam, dtype=float)
    return math.sqrt(rho * float(By @ By) + float(lam @ lam) / rho)


def lyapunov(y, lam, y_ref, lam_ref, B, rho):
    """V = (1/rho)||lam - lam_ref||^2 + rho ||B (y - y_ref)||^2."""
    if not rho > 0:
        raise ValueError("rho must be positive")
    dl = np.asarray(lam, dtype=float) - np.asarray(lam_ref, dtype=float)
    By = np.asarray(B, dtype=float) @ (np.asarray(y, dtype=float) - np.asarray(y_ref, dtype=float))
    return float(dl @ dl) / rho + rho * float(By @ By)


@dataclass
class LyapunovSeries:
    """Per-iterate V and rho-norm distance, and per-step decrease slack.

    ``slack[i]`` belongs to the step from ``k[i]`` to ``k[i + 1]``:
    V^k - V^{k+1} - rho ||B(y^k - y^{k+1})||^2 - (rho/2) ||q^{k+1}||^2.
    ``entry_index`` is the first step index after which every slack is
    ``>= -tol * max(1, V^k)`` (None if the last step violates it).
    """

    k: list = field(default_factory=list)
    V: list = field(default_factory=list)
    distance: list = field(default_factory=list)
    slack: list = field(default_factory=list)
    entry_index: int | None = None
    tol: float = 1e-9

    def violations(self, start=0):
        return [i for i in range(start, len(self.slack))
                if self.slack[i] < -self.tol * max(1.0, self.V[i])]

    def to_dict(self):
        return {"k": self.k, "V": self.V, "distance": self.distance, "slack": self.slack,
                "entry_index": self.entry_index, "tol": self.tol}


def _trace_states(trace):
    # accepts a Trace or any sequence of objects with k, y, lam, q attributes
    return list(getattr(trace, "iterates", trace))


def verify_decrease_bound(trace, y_ref, lam_ref, B, rho, tol=1e-9):
    """Evaluate the Lyapunov decrease bound between consecutive iterates.

    Violations are reported, not raised: the bound is only guaranteed near
    a regular solution and for large enough rho.
    """
    states = _trace_states(trace)
    out = LyapunovSeries(tol=tol)
    B = np.asarray(B, dtype=float)
    for s in states:
        out.k.append(int(s.k))
        out.V.append(lyapunov(s.y, s.lam, y_ref, lam_ref, B, rho))
        out.distance.append(rho_norm(np.asarray(s.y) - y_ref, np.asarray(s.lam) - lam_ref, B, rho))
    for i in range(len(states) - 1):
        a, b = states[i], states[i + 1]
        By = B @ (np.asarray(a.y) - np.asarray(b.y))
        qn = float(b.norm_q) if hasattr(b, "norm_q") else float(np.linalg.norm(b.q))
        out.slack.append(out.V[i] - out.V[i + 1] - rho * float(By @ By) - 0.5 * rho * qn * qn)
    bad = out.violations()
    if not out.slack:
        out.entry_index = None
    elif not bad:
        out.entry_index = 0
    elif bad[-1] == len(out.slack) - 1:
        out.entry_index = None
    else:
        out.entry_index = bad[-1] + 1
    return out


@dataclass
class RateSeries:
    """Distances d^k in the rho-norm and ratios d^{k+1}/d^k."""

    k: list = field(default_factory=list)
    distance: list = field(default_factory=list)
    ratio: list = field(default_factory=list)
    ratio_k: list = field(default_factory=list)
    finite_termination: int | None = None

    def to_dict(self):
        return {"k": self.k, "distance": self.distance, "ratio": self.ratio,
                "ratio_k": self.ratio_k, "finite_termination": self.finite_termination}


def convergence_rate(trace, y_ref, lam_ref, B, rho, zero=1e-14):
    """Ratios of successive rho-norm distances to the reference.

    Pairs whose base distance is below ``zero`` are skipped; an exact zero
    distance ends the series (finite convergence).
    """
    out = RateSeries()
    for s in _trace_states(trace):
        d = rho_norm(np.asarray(s.y) - y_ref, np.asarray(s.lam) - lam_ref, B, rho)
        out.k.append(int(s.k))
        out.distance.append(d)
        if d == 0.0:
            out.finite_termination = int(s.k)
            break
    for i in range(len(out.distance) - 1):
        if out.distance[i] < zero:
            continue
        out.ratio.append(out.distance[i + 1] / out.distance[i])
        out.ratio_k.append(out.k[i])
    return out


# ---------------------------------------------------------------------------
# Reference KKT points

@dataclass(frozen=True)
class KktPoint:
    x: np.ndarray
    y: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    objective: float
    kkt: KktReport
    sosc_ok: bool
    min_projected_eig: float

    def to_dict(self):
        return {"x": self.x.tolist(), "y": self.y.tolist(), "mu": self.mu.tolist(),
                "lambda": self.lam.tolist(), "objective": self.objective,
                "kkt": self.kkt.to_dict(), "sosc_ok": self.sosc_ok,
                "min_projected_eig": self.min_projected_eig}


def full_kkt_instance(prob, z0):
    """The whole problem as one NLP in z = (x, y) with multipliers (mu, lam)."""
    n, m, p = prob.n, prob.m, prob.p
    AB = np.hstack([prob.A, prob.B])

    def fun(z):
        return prob.f.value(z[:n])

    def grad(z):
        return np.concatenate([prob.f.gradient(z[:n]), np.zeros(m)])

    def hess(z):
        H = np.zeros((n + m, n + m))
        H[:n, :n] = prob.f.hessian(z[:n])
        return H

    def cons(z):
        return np.concatenate([prob.cons(z[:n]), AB @ z - prob.b])

    def jac(z):
        return np.vstack([np.hstack([prob.jac(z[:n]), np.zeros((p, m))]), AB])

    def cons_hess(z, mult):
        H = np.zeros((n + m, n + m))
        H[:n, :n] = prob.cons_hess(z[:n], mult[:p])
        return H

    return NlpInstance(fun=fun, grad=grad, hess=hess, cons=cons, jac=jac,
                       cons_hess=cons_hess, z0=np.asarray(z0, dtype=float))


def reference_solution(prob, n_starts=20, seed=0, box=5.0, tol=1e-11, dedup=1e-6,
                       kkt_tol=1e-10, extra_starts=()):
    """Multistart Newton on the full KKT system.

    Starts are drawn uniformly from ``[-box, box]^(n+m)`` with a seeded
    generator (``extra_starts`` are tried first).  Points within ``dedup`` of
    one already found are dropped; survivors must pass :func:`check_kkt` to
    ``kkt_tol`` and are classified by :func:`check_sosc`.  Results are sorted
    by objective value, then lexicographically by x.
    """
    if n_starts < 1:
        raise ValueError("n_starts must be at least 1")
    rng = np.random.default_rng(seed)
    d = prob.n + prob.m
    starts = [np.asarray(s, dtype=float) for s in extra_starts]
    starts += list(rng.uniform(-box, box, size=(n_starts, d)))
    found = []
    for z0 in starts:
        sol = solve_eq_nlp(full_kkt_instance(prob, z0), tol, tol, max_iter=200)
        if sol.status is not Status.CONVERGED:
            continue
        x, y = sol.z[:prob.n], sol.z[prob.n:]
        mu, lam = sol.mu[:prob.p], sol.mu[prob.p:]
        rep = check_kkt(prob, x, y, mu, lam)
        if rep.max() > kkt_tol:
            continue
        vec = np.concatenate([x, y, mu, lam])
        if any(np.linalg.norm(vec - np.concatenate([k.x, k.y, k.mu, k.lam])) < dedup
               for k in found):
            continue
        sosc = check_sosc(prob, x, mu)
        found.append(KktPoint(x=x, y=y, mu=mu, lam=lam, objective=prob.f.value(x), kkt=rep,
                              sosc_ok=sosc.overall_ok, min_projected_eig=sosc.min_projected_eig))
    found.sort(key=lambda k: (round(k.objective, 12), tuple(np.round(k.x, 9))))
    return found


def nearest_reference(refs, y, lam, B, rho):
    """Reference point closest to (y, lam) in the rho-norm, with its distance."""
    best, best_d = None, math.inf
    for ref in refs:
        d = rho_norm(np.asarray(y) - ref.y, np.asarray(lam) - ref.lam, B, rho)
        if d < best_d:
            best, best_d = ref, d
    return best, best_d
