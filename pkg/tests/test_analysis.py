import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nadmm.admm import AdmmConfig, run
from nadmm.analysis import (HypothesisError, check_kkt, check_licq, check_sosc,
                            convergence_rate, critical_rho, lyapunov, nearest_reference,
                            problem_critical_rho, reference_solution, regularity, rho_norm,
                            verify_decrease_bound)
from nadmm.model import Problem
from nadmm.nlpsolve import null_space


def xy_problem(objective="(x - 1)^2", constraints=()):
    return Problem(("x",), ("y",), objective, constraints, [[1.0]], [[-1.0]], [0.0])


def state(k, y, lam, q=None):
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    return SimpleNamespace(k=k, y=np.atleast_1d(np.asarray(y, dtype=float)), lam=lam,
                           q=np.zeros_like(lam) if q is None else np.atleast_1d(q))


def random_hypothesis_instance(rng):
    """Random (H, C, D) with H positive definite on null([C; D])."""
    d = int(rng.integers(2, 6))
    pc = int(rng.integers(0, d - 1))
    pd = int(rng.integers(1, d - pc + 1))
    C = rng.standard_normal((pc, d))
    D = rng.standard_normal((pd, d))
    W = null_space(np.vstack([C, D]))
    M = rng.standard_normal((d, d))
    H = 0.5 * (M + M.T)
    if W.shape[1]:
        # shift H so that it is positive definite on null([C; D])
        low = np.linalg.eigvalsh(W.T @ H @ W)[0]
        H = H + (abs(low) + rng.uniform(0.1, 1.0)) * (W @ W.T)
    return H, C, D


def projected_min(H, C, D, rho):
    Z = null_space(C)
    P = Z.T @ (H + rho * D.T @ D) @ Z
    return np.linalg.eigvalsh(0.5 * (P + P.T))[0]


class TestKkt:
    def test_solution_is_zero(self):
        rep = check_kkt(xy_problem(), [1.0], [1.0], [], [0.0])
        assert rep.max() <= 1e-12

    def test_perturbed_x(self):
        rep = check_kkt(xy_problem(), [1.001], [1.0], [], [0.0])
        assert rep.stationarity_x == pytest.approx(2e-3, rel=1e-9)

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_matches_direct_formulas(self, seed):
        rng = np.random.default_rng(seed)
        p = Problem(("u", "v"), ("y",), "u^2*v + sin(u)", ("u^2 + v^2 - 1",),
                    [[1.0, 0.0], [0.0, 2.0]], [[-1.0], [1.0]], [0.5, -0.5])
        u, v, y, mu = rng.standard_normal(4)
        lam = rng.standard_normal(2)
        rep = check_kkt(p, [u, v], [y], [mu], lam)
        gx = np.array([2 * u * v + math.cos(u) + 2 * u * mu + lam[0],
                       u * u + 2 * v * mu + 2 * lam[1]])
        assert rep.stationarity_x == pytest.approx(np.hypot(*gx), rel=1e-12)
        assert rep.stationarity_y == pytest.approx(abs(lam[1] - lam[0]), rel=1e-12)
        assert rep.constraint == pytest.approx(abs(u * u + v * v - 1), rel=1e-12)
        assert rep.coupling == pytest.approx(np.hypot(u - y - 0.5, 2 * v + y + 0.5), rel=1e-12)


class TestLicq:
    def test_examples(self):
        p = xy_problem("x", ("x^2 - 1",))
        assert check_licq(p, [1.0]) == (True, 2)
        assert check_licq(p, [0.0]) == (False, 1)
        dup = xy_problem("x", ("x^2 - 1", "x^2 - 1"))
        assert check_licq(dup, [1.0])[0] is False


class TestSosc:
    def test_convex(self):
        res = check_sosc(xy_problem(), [1.0], [])
        assert res.overall_ok and res.min_projected_eig == pytest.approx(1.0)

    def test_concave(self):
        res = check_sosc(xy_problem("-x^2"), [0.0], [])
        assert not res.overall_ok and res.min_projected_eig == pytest.approx(-1.0)

    def test_subproblem_vacuous(self):
        p = xy_problem("-x^2", ("x^2 - 1",))
        # stationarity: -2 + 2 mu + lam = 0 with lam = 0
        res = check_sosc(p, [1.0], [1.0], rho=0.5)
        assert res.subproblem_ok and res.subproblem_min_eig == math.inf

    def test_implies_subproblem_sosc_above_critical(self, load):
        for name in ("consensus_qp", "two_roots", "two_block_quartic", "shared_budget",
                     "slack_bound"):
            p = load(name)
            for ref in reference_solution(p, 20, 0):
                if not ref.sosc_ok:
                    continue
                crho = problem_critical_rho(p, ref.x, ref.mu)
                for rho in (1.01 * crho + 1e-6, 2 * crho + 1.0, 100 * crho + 10.0):
                    assert check_sosc(p, ref.x, ref.mu, rho).subproblem_ok, (name, rho)


class TestCriticalRho:
    def test_analytic(self):
        assert critical_rho(np.diag([-1.0, 1.0]), np.zeros((0, 2)), [[1.0, 0.0]]) == \
            pytest.approx(1.0, rel=1e-6)

    def test_already_definite(self):
        assert critical_rho(np.eye(3), np.zeros((0, 3)), [[1.0, 2.0, 3.0]]) == 0.0

    def test_hypothesis_violated(self):
        with pytest.raises(HypothesisError) as info:
            critical_rho(np.diag([-1.0, 1.0]), np.zeros((0, 2)), [[0.0, 1.0]])
        direction = info.value.direction
        assert abs(direction[0]) == pytest.approx(1.0) and direction[1] == pytest.approx(0.0)
        assert info.value.curvature == pytest.approx(-1.0)

    def test_with_kept_constraint(self):
        # restricted to null([1, 0, 0]) = span(e2, e3) the matrix is diag(-2 + 4 rho, 1)
        H = np.diag([5.0, -2.0, 1.0])
        rho = critical_rho(H, [[1.0, 0.0, 0.0]], [[0.0, 2.0, 0.0]])
        assert rho == pytest.approx(0.5, rel=1e-6)

    def test_cap_returns_inf(self):
        H = np.diag([-1.0, 1.0])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            assert critical_rho(H, np.zeros((0, 2)), [[1e-7, 0.0]]) == math.inf
        assert caught

    def test_near_zero_terminates(self):
        # lambda_min(0) is exactly zero: the bisection must stop near 0
        H = np.diag([0.0, 1.0])
        assert critical_rho(H, np.zeros((0, 2)), [[1.0, 0.0]]) <= 1e-9

    @given(st.integers(0, 100_000))
    @settings(max_examples=100, deadline=None)
    def test_bisection_certificate(self, seed):
        H, C, D = random_hypothesis_instance(np.random.default_rng(seed))
        rho = critical_rho(H, C, D)
        assert projected_min(H, C, D, 1.01 * rho + 1e-12) > 0
        if rho > 0:
            assert projected_min(H, C, D, 0.5 * rho) <= 1e-9

    def test_regularity_report(self, load):
        p = load("two_roots")
        reg = regularity(p, [1.0], [1.0], rho=3.0)
        assert reg.licq_ok and reg.rank == reg.expected_rank == 2
        assert reg.sosc_ok and reg.subproblem_sosc_ok
        assert set(reg.to_dict()) >= {"licq_ok", "critical_rho", "min_projected_eig"}


class TestLyapunov:
    def test_examples(self):
        B = np.eye(2)
        assert lyapunov([1, 2], [3, 4], [1, 2], [3, 4], B, 2.0) == 0.0
        assert lyapunov([1, 0], [2, 0], [0, 0], [0, 0], B, 4.0) == pytest.approx(5.0)

    @given(st.integers(0, 10_000))
    @settings(max_examples=100, deadline=None)
    def test_norm_properties(self, seed):
        rng = np.random.default_rng(seed)
        B = rng.standard_normal((4, 2))
        rho = float(rng.uniform(0.01, 100))
        y, lam, y2, lam2, yr, lr = (rng.standard_normal(s) for s in (2, 4, 2, 4, 2, 4))
        assert lyapunov(y, lam, yr, lr, B, rho) == pytest.approx(
            rho_norm(y - yr, lam - lr, B, rho) ** 2, rel=1e-12)
        t = float(rng.uniform(-5, 5))
        assert rho_norm(t * y, t * lam, B, rho) == pytest.approx(
            abs(t) * rho_norm(y, lam, B, rho), rel=1e-12)
        assert rho_norm(y + y2, lam + lam2, B, rho) <= (
            rho_norm(y, lam, B, rho) + rho_norm(y2, lam2, B, rho)) * (1 + 1e-12)
        assert rho_norm(np.zeros(2), np.zeros(4), B, rho) == 0.0

    def test_rho_positive(self):
        with pytest.raises(ValueError):
            rho_norm([1.0], [1.0], np.eye(1), 0.0)


class TestDecreaseAndRate:
    def test_single_iterate(self):
        s = verify_decrease_bound([state(1, 1.0, 1.0)], [0.0], [0.0], np.eye(1), 1.0)
        assert s.slack == [] and len(s.V) == 1

    def test_fixed_point(self):
        trace = [state(k, 2.0, 3.0) for k in range(1, 5)]
        s = verify_decrease_bound(trace, [2.0], [3.0], np.eye(1), 5.0)
        assert s.slack == [0.0, 0.0, 0.0] and s.entry_index == 0

    def test_constant_ratio_one(self):
        trace = [state(k, 1.0, 1.0) for k in range(1, 4)]
        assert convergence_rate(trace, [0.0], [0.0], np.eye(1), 2.0).ratio == [1.0, 1.0]

    def test_finite_termination(self):
        trace = [state(1, 1.0, 0.0), state(2, 0.5, 0.0), state(3, 0.0, 0.0), state(4, 0.0, 0.0)]
        rate = convergence_rate(trace, [0.0], [0.0], np.eye(1), 1.0)
        assert rate.finite_termination == 3 and rate.ratio == [0.5, 0.0]

    def test_violations_reported(self):
        # V increases from step 1 to 2
        trace = [state(1, 0.0, 1.0), state(2, 0.0, 2.0), state(3, 0.0, 0.0)]
        s = verify_decrease_bound(trace, [0.0], [0.0], np.eye(1), 1.0)
        assert s.violations() == [0] and s.entry_index == 1

    def test_converged_consensus_run(self, load):
        p = load("consensus_qp")
        _, trace = run(p, AdmmConfig(rho=10.0))
        y_ref, lam_ref = np.array([1.0]), np.zeros(2)
        s = verify_decrease_bound(trace, y_ref, lam_ref, p.B, 10.0)
        assert s.entry_index is not None
        assert not s.violations(s.entry_index)
        rate = convergence_rate(trace, y_ref, lam_ref, p.B, 10.0)
        assert max(rate.ratio) <= 1 + 1e-9


class TestReferenceSolution:
    def test_convex_single_point(self):
        refs = reference_solution(xy_problem(), 10, 0)
        assert len(refs) == 1
        np.testing.assert_allclose([refs[0].x[0], refs[0].y[0], refs[0].lam[0]], [1, 1, 0],
                                   atol=1e-10)

    def test_two_roots(self, load):
        refs = reference_solution(load("two_roots"), 20, 0)
        xs = sorted(r.x[0] for r in refs)
        assert xs == pytest.approx([-1.0, 1.0], abs=1e-10)
        for r in refs:
            assert r.kkt.max() <= 1e-10

    def test_seeded(self, load):
        a = reference_solution(load("two_block_quartic"), 10, 7)
        b = reference_solution(load("two_block_quartic"), 10, 7)
        assert [r.x.tolist() for r in a] == [r.x.tolist() for r in b]

    def test_matches_grid_search(self):
        # x on the unit circle, y copies u: KKT points are the critical points of
        # g(t) = f(cos t, sin t)
        p = Problem(("u", "v"), ("y",), "u^4 + v^4 - 2*u*v + 0.3*u", ("u^2 + v^2 - 1",),
                    [[1.0, 0.0]], [[-1.0]], [0.0])

        def g(t):
            u, v = np.cos(t), np.sin(t)
            return u**4 + v**4 - 2 * u * v + 0.3 * u

        h = 1e-3
        t = np.arange(0.0, 2 * np.pi, h)
        vals = g(t)
        prev, nxt = np.roll(vals, 1), np.roll(vals, -1)
        grid = []
        for i in np.where(((vals < prev) & (vals <= nxt)) | ((vals > prev) & (vals >= nxt)))[0]:
            # parabolic refinement through the three neighbouring samples
            denom = prev[i] - 2 * vals[i] + nxt[i]
            ts = t[i] + 0.5 * h * (prev[i] - nxt[i]) / denom
            grid.append((np.cos(ts), np.sin(ts)))
        refs = reference_solution(p, 60, 0)
        assert len(refs) == len(grid)
        for u, v in grid:
            assert min(np.hypot(r.x[0] - u, r.x[1] - v) for r in refs) <= 1e-4

    def test_nearest_reference(self, load):
        p = load("two_roots")
        refs = reference_solution(p, 20, 0)
        ref, dist = nearest_reference(refs, [-0.98], [0.0], p.B, 1.0)
        assert ref.x[0] == pytest.approx(-1.0) and dist == pytest.approx(0.02)

    def test_invalid_starts(self):
        with pytest.raises(ValueError):
            reference_solution(xy_problem(), 0)
