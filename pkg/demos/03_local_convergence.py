"""Local convergence near a strict local solution of a nonconvex problem.

The two-block quartic has several KKT points.  A seeded multistart finds
them, the regularity checks classify them, and a run started near one of
them converges to it with a monotone Lyapunov function.
"""

# %%
from pathlib import Path

import numpy as np

import nadmm
from nadmm.admm import AdmmConfig, run
from nadmm.analysis import (convergence_rate, problem_critical_rho, reference_solution,
                            regularity, rho_norm, verify_decrease_bound)
from nadmm.cli import load_problem

prob = load_problem(Path(nadmm.__file__).parent / "fixtures" / "two_block_quartic.json")
refs = reference_solution(prob, n_starts=40, seed=1)
# Critical rho is only defined where second-order sufficiency holds.
for i, r in enumerate(refs):
    crho = problem_critical_rho(prob, r.x, r.mu) if r.sosc_ok else float("nan")
    print(f"[{i}] f={r.objective:+.5f}  sosc={r.sosc_ok}  critical rho={crho:.4g}")

# %%
# Pick the strict local solution with the largest positive critical rho.
ref = max((r for r in refs if r.sosc_ok), key=lambda r: problem_critical_rho(prob, r.x, r.mu))
crho = problem_critical_rho(prob, ref.x, ref.mu)
rho = 10 * crho
print(regularity(prob, ref.x, ref.mu, rho).to_dict())

# %%
# Start a short rho-norm distance away and let ADMM run.
rng = np.random.default_rng(0)
y0 = ref.y + 0.02 * rng.standard_normal(prob.m)
report, trace = run(prob, AdmmConfig(rho=rho, y0=y0, lambda0=ref.lam, x0=ref.x + 0.01,
                                     max_iter=2000))
dist = rho_norm(report.y - ref.y, report.lam - ref.lam, prob.B, rho)
print(report.status, report.iterations, "iterations, final distance", dist)

# %%
# The Lyapunov function never increases, and distances contract.
series = verify_decrease_bound(trace, ref.y, ref.lam, prob.B, rho)
rate = convergence_rate(trace, ref.y, ref.lam, prob.B, rho)
print("entry index:", series.entry_index, " violations:", series.violations())
print("largest contraction ratio:", max(rate.ratio) if rate.ratio else None)
