"""Which KKT point ADMM finds depends on where the inner solver starts.

min (x - 2)^2 subject to x^2 = 1 has KKT points at x = 1 and x = -1.
"""

# %%
from pathlib import Path

import nadmm
from nadmm.admm import AdmmConfig, run
from nadmm.analysis import reference_solution
from nadmm.cli import load_problem

prob = load_problem(Path(nadmm.__file__).parent / "fixtures" / "two_roots.json")
for r in reference_solution(prob, n_starts=10, seed=0):
    print(f"reference x={r.x[0]:+.3f} mu={r.mu[0]:+.3f} f={r.objective:.3f}")

# %%
for start in (0.9, -0.9):
    report, _ = run(prob, AdmmConfig(rho=10.0, x0=[start], y0=[start]))
    print(f"start {start:+.1f} -> x={report.x[0]:+.6f} mu={report.mu[0]:+.6f}")
