"""Two copies of a variable forced to agree through a shared y.

The consensus fixture has the optimum x1 = x2 = y = 1 with zero multipliers.
"""

# %%
from pathlib import Path

import numpy as np

import nadmm
from nadmm.admm import AdmmConfig, run
from nadmm.cli import load_problem

FIXTURES = Path(nadmm.__file__).parent / "fixtures"
prob = load_problem(FIXTURES / "consensus_qp.json")
print(prob.variables, prob.y_variables, "q =", prob.q)

# %%
report, trace = run(prob, AdmmConfig(rho=10.0))
print(report.status, "after", report.iterations, "iterations")
print("x =", report.x, " y =", report.y, " lambda =", report.lam)

# %%
# Primal and dual residuals shrink geometrically once the iterates settle.
for it in list(trace)[::15]:
    print(f"k={it.k:4d}  |q|={it.norm_q:.2e}  |r|={it.norm_r:.2e}")

# %%
# Every iterate keeps lambda in the null space of B^T.
print("max |B^T lambda|:", max(np.linalg.norm(prob.B.T @ it.lam) for it in trace))
