"""Expression trees and exact derivatives.

Parse a formula, evaluate it, and compare the exact gradient and Hessian
with finite differences.
"""

# %%
import numpy as np

from nadmm.expr import CompiledExpr, parse_expr, to_text

e = parse_expr("sin(x)*y^2 + exp(x*y) - cos(1 + x^2)")
print("parsed:", to_text(e))

# %%
# Compile once and evaluate at a point.  The variable order fixes the layout
# of the gradient vector.
f = CompiledExpr(e, ("x", "y"))
z = np.array([0.4, -1.3])
print("value   :", f.value(z))
print("gradient:", f.gradient(z))
print("hessian :\n", f.hessian(z))

# %%
# Central differences agree to about eight digits.
h = 1e-6
fd = np.array([(f.value(z + h * v) - f.value(z - h * v)) / (2 * h) for v in np.eye(2)])
print("max gradient gap:", np.max(np.abs(fd - f.gradient(z))))
