"""Estimate the contraction factor h and variance factor q of local optimizers.

On an isotropic quadratic, SGD has closed forms h = (1 - lr mu)^(2k) and
q = k lr^2 for k local steps with unit noise. The Monte Carlo estimates match
them. On a skewed logistic regression client, adaptive optimizers reach a
smaller h than SGD at their best learning rate.
"""

import numpy as np

from fedcorrect.analysis import estimate_h, estimate_q, sgd_h, sgd_q
from fedcorrect.client_opt import ClientOptKind
from fedcorrect.problems import NoiseModel, QuadraticFamily, make_logreg

iso = QuadraticFamily(H=np.array([np.eye(2)]), e=np.zeros((1, 2)))
sgd = ClientOptKind("sgd", lr=0.1)
for k in (1, 5, 10):
    h = estimate_h(sgd, iso, 0, k, np.zeros(2), np.array([1.0, 2.0])).h_hat
    q = estimate_q(sgd, iso, 0, k, np.zeros(2), NoiseModel(sigma=1.0), trials=5000,
                   rng=np.random.default_rng(k)).q_hat
    print(f"k={k:2d}  h={h:.6f} (closed form {sgd_h(0.1, 1.0, k):.6f})  q={q:.5f} (bound {sgd_q(0.1, k):.5f})")

task = make_logreg(0, 2, 256, 10, skew=0.3)
rng = np.random.default_rng(100)
x = rng.normal(size=10)
y = x + rng.normal(size=10)
print("\nbest h over lr in {0.5, 0.2, 0.02, 0.002}, 10 local steps, batch 16")
for name, extra in (("sgd", {}), ("adagrad", {}), ("adam", {"beta1": 0.9, "beta2": 0.99})):
    best = np.inf
    for lr in (0.5, 0.2, 0.02, 0.002):
        kind = ClientOptKind(name, lr=lr, local_steps=10, **extra)
        try:
            rep = estimate_h(kind, task, 0, 10, x, y, trials=20, rng=np.random.default_rng(0),
                             noise=NoiseModel(batch_size=16))
        except FloatingPointError:
            continue
        best = min(best, rep.h_hat)
    print(f"{name:8s} h = {best:.3f}")
