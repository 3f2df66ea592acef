"""Local steps move the federated fixed point away from the global minimizer.

Two 1-D clients with curvatures 1 and 2 and minimizers 1 and 2 share the
global minimizer x* = 5/3. With two local SGD steps the server converges to a
different point, and the gap shrinks linearly with the client learning rate.
"""

import numpy as np

from fedcorrect import fixed_point_closed_form, global_min, run_experiment
from fedcorrect.problems import hetero_1d

fam = hetero_1d()
x_star = global_min(fam)[0]
cfg = {
    "schema_version": 1,
    "problem": {"type": "quadratic", "preset": "hetero_1d"},
    "client_opt": {"kind": "sgd", "lr": 0.1, "local_steps": 2},
    "rounds": 500,
}
res = run_experiment(cfg)
print(f"global minimizer x*          = {x_star:.6f}")
print(f"simulated limit after 500 rounds = {res.x_final[0]:.6f}")
print(f"closed-form fixed point      = {fixed_point_closed_form(fam, 0.1, 2)[0]:.6f}")

print("\nclient lr   gap to x*   (local_steps = 4)")
for eta in (1e-1, 5e-2, 2.5e-2, 1.25e-2):
    gap = np.linalg.norm(fixed_point_closed_form(fam, eta, 4) - x_star)
    print(f"{eta:9.4f}   {gap:.6f}")
