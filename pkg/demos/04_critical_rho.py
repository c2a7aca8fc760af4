"""The smallest penalty that makes a subproblem Hessian positive definite.

With H = diag(-1, 1) and a penalized row D = [1, 0], adding rho * D^T D
lifts the negative eigenvalue to rho - 1, so the threshold is exactly 1.
"""

# %%
import numpy as np

from nadmm.analysis import critical_rho

H = np.diag([-1.0, 1.0])
C = np.zeros((0, 2))
D = np.array([[1.0, 0.0]])
rho_star = critical_rho(H, C, D)
print("critical rho:", rho_star)

# %%
for rho in (0.5 * rho_star, 1.01 * rho_star, 2 * rho_star):
    lam = np.linalg.eigvalsh(H + rho * D.T @ D)[0]
    print(f"rho={rho:.3f}  smallest eigenvalue={lam:+.4f}")

# %%
# A kept constraint restricts the test to its null space.  Here the
# negative direction is removed outright, so no penalty is needed.
print("with x1 held fixed:", critical_rho(H, np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])))
