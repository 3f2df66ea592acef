"""Check the explicit squared-error bound against simulated noisy training.

A 1000-dimensional problem whose coordinates are independent copies of the
1-D two-client family stands in for 1000 independent seeds. The server
learning rate is the horizon-tuned constant that the bound assumes.
"""

import numpy as np

from fedcorrect import fixed_point_closed_form, run_experiment
from fedcorrect.analysis import BoundInputs, error_bound, horizon_server_lr, sgd_h, sgd_q
from fedcorrect.problems import hetero_1d

n, lr, tau, sigma = 1000, 0.1, 2, 1.0
fam = hetero_1d()
fixed = fixed_point_closed_form(fam, lr, tau)[0]
h = [sgd_h(lr, 1.0, tau), sgd_h(lr, 2.0, tau)]
print("rounds   server lr   mean sq error   bound")
for T in (5, 20, 100, 400):
    b = BoundInputs(h, [sgd_q(lr, tau)] * 2, list(fam.w), sigma, fixed**2, T)
    alpha = horizon_server_lr(b)
    cfg = {
        "schema_version": 1,
        "problem": {"type": "quadratic", "clients": [{"H": [1.0] * n, "x_star": [1.0] * n},
                                                    {"H": [2.0] * n, "x_star": [2.0] * n}]},
        "client_opt": {"kind": "sgd", "lr": lr, "local_steps": tau},
        "server_opt": {"kind": "gd", "lr": alpha},
        "rounds": T, "noise": {"sigma": sigma}, "max_dim": n, "compute_metrics": False, "seed": 5,
    }
    err = float(np.mean((run_experiment(cfg).x_final - fixed) ** 2))
    print(f"{T:6d}   {alpha:9.4f}   {err:13.3e}   {error_bound(b):.3e}")
