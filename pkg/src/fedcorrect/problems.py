"""Federated problem families and their gradient oracles.

Quadratic families ``F_i(x) = 0.5 x'H_i x - e_i'x + c_i`` come with direct-solve
oracles: local and global minimizers, the fixed point of the deterministic
round operator for preconditioned GD clients, its small-learning-rate limit,
and the skewed residual ``x - A(x)``. The synthetic logistic-regression task
stands in for real federated datasets.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

MAX_CONDITION = 1e12


class NotContractiveError(ValueError):
    def __init__(self, norm: float):
        self.norm = norm
        super().__init__(f"round operator is not contractive: spectral norm {norm:.6g} >= 1")


# ---------------------------------------------------------------- quadratics


@dataclass(frozen=True)
class QuadraticFamily:
    H: np.ndarray  # (M, d, d)
    e: np.ndarray  # (M, d)
    c: np.ndarray | None = None  # (M,), zeros when omitted
    w: np.ndarray | None = None  # (M,), uniform when omitted

    def __post_init__(self):
        H = np.asarray(self.H, dtype=float)
        e = np.asarray(self.e, dtype=float)
        if H.ndim != 3 or H.shape[1] != H.shape[2]:
            raise ValueError(f"H must have shape (M, d, d), got {H.shape}")
        m, d = H.shape[0], H.shape[1]
        if e.shape != (m, d):
            raise ValueError(f"e must have shape {(m, d)}, got {e.shape}")
        c = np.zeros(m) if self.c is None else np.broadcast_to(np.asarray(self.c, dtype=float), (m,)).copy()
        w = np.full(m, 1.0 / m) if self.w is None else np.asarray(self.w, dtype=float)
        if w.shape != (m,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("client weights must be non-negative and sum to 1")
        for i in range(m):
            if np.max(np.abs(H[i] - H[i].T)) >= 1e-12:
                raise ValueError(f"H[{i}] is not symmetric")
            if np.min(np.linalg.eigvalsh(H[i])) <= 0:
                raise ValueError(f"H[{i}] is not positive definite")
        for name, val in (("H", H), ("e", e), ("c", c), ("w", w)):
            object.__setattr__(self, name, val)

    @property
    def num_clients(self) -> int:
        return self.H.shape[0]

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    @cached_property
    def diagonal(self) -> bool:
        off = self.H - np.einsum("mii->mi", self.H)[:, :, None] * np.eye(self.dim)
        return not np.any(off)

    @classmethod
    def from_minimizers(cls, H, x_star, w=None, c=None) -> QuadraticFamily:
        """Build the family from Hessians and local minimizers (``e_i = H_i x_i*``)."""
        H = np.asarray(H, dtype=float)
        x_star = np.asarray(x_star, dtype=float)
        if H.ndim == 2:
            # list of diagonals
            H = np.stack([np.diag(h) for h in H])
        if x_star.ndim == 1:
            x_star = x_star[:, None]
        e = np.einsum("mij,mj->mi", H, x_star)
        return cls(H=H, e=e, c=c, w=w)


def hetero_1d() -> QuadraticFamily:
    """Two 1-D clients: w = (1/2, 1/2), H = (1, 2), x_i* = (1, 2). Global minimizer 5/3."""
    return QuadraticFamily.from_minimizers([[1.0], [2.0]], [1.0, 2.0], w=[0.5, 0.5])


def hetero_2d() -> QuadraticFamily:
    """Two 2-D clients with differently oriented, ill-conditioned curvature.

    Client 0: H = diag(1, 8), x* = (1, 0). Client 1: H = [[4, 1.5], [1.5, 1]],
    x* = (-1, 1). Equal weights.
    """
    H = [np.diag([1.0, 8.0]), np.array([[4.0, 1.5], [1.5, 1.0]])]
    return QuadraticFamily.from_minimizers(H, [[1.0, 0.0], [-1.0, 1.0]], w=[0.5, 0.5])


PRESETS = {"hetero_1d": hetero_1d, "hetero_2d": hetero_2d}


def quad_grad(family: QuadraticFamily, i: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if family.diagonal:
        return np.diagonal(family.H[i]) * x - family.e[i]
    return family.H[i] @ x - family.e[i]


def quad_loss(family: QuadraticFamily, i: int, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(0.5 * x @ family.H[i] @ x - family.e[i] @ x + family.c[i])


def _solve(a, b, what):
    cond = np.linalg.cond(a)
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise np.linalg.LinAlgError(f"{what} is ill-conditioned (condition number {cond:.3g})")
    return np.linalg.solve(a, b)


def local_min(family: QuadraticFamily, i: int) -> np.ndarray:
    return _solve(family.H[i], family.e[i], f"H[{i}]")


def global_min(family: QuadraticFamily) -> np.ndarray:
    """``(sum w_i H_i)^{-1} sum w_i H_i x_i*``, which equals ``(sum w_i H_i)^{-1} sum w_i e_i``."""
    h_bar = np.einsum("m,mij->ij", family.w, family.H)
    rhs = sum(family.w[i] * family.H[i] @ local_min(family, i) for i in range(family.num_clients))
    return _solve(h_bar, rhs, "sum_i w_i H_i")


def per_client(value, m: int, name: str) -> list:
    """Broadcast a scalar to one entry per client, or check a per-client list."""
    if np.ndim(value) == 0:
        return [value] * m
    if len(value) != m:
        raise ValueError(f"{name} needs one entry per client ({m}), got {len(value)}")
    return list(value)


def _precond_matrix(p, d):
    if p is None:
        return np.eye(d)
    p = np.asarray(p, dtype=float)
    if p.ndim == 1:
        return np.diag(p)
    return p


def _operator_matrices(family, lrs, steps, preconds):
    """Per-client ``K_i = (I - eta_i P_i H_i)^{tau_i}``."""
    m, d = family.num_clients, family.dim
    lrs = per_client(lrs, m, "lrs")
    steps = per_client(steps, m, "steps")
    preconds = [None] * m if preconds is None else _per_client_list(preconds, m)
    eye = np.eye(d)
    ks = []
    for i in range(m):
        if steps[i] < 1 or lrs[i] <= 0:
            raise ValueError("every client needs lr > 0 and at least one local step")
        step_map = eye - lrs[i] * _precond_matrix(preconds[i], d) @ family.H[i]
        k = eye.copy()
        for _ in range(int(steps[i])):
            k = step_map @ k
        ks.append(k)
    return ks, lrs, steps, preconds


def _per_client_list(preconds, m):
    if len(preconds) != m:
        raise ValueError(f"need one preconditioner per client ({m}), got {len(preconds)}")
    return list(preconds)


def round_operator_matrix(family, lrs, steps, preconds=None) -> np.ndarray:
    """Linear part ``sum_i w_i K_i`` of the deterministic round operator."""
    ks, *_ = _operator_matrices(family, lrs, steps, preconds)
    return sum(w * k for w, k in zip(family.w, ks))


def fixed_point_closed_form(family, lrs, steps, preconds=None, corrected: bool = False) -> np.ndarray:
    """Fixed point of the deterministic round operator for fixed-preconditioner GD clients.

    Uncorrected: ``[sum w_i (I - K_i)]^{-1} sum w_i (I - K_i) x_i*``.
    With ``corrected=True`` each client's change is first divided by
    ``N_i = eta_i tau_i P_i`` (diagonal preconditioners only), which replaces
    ``I - K_i`` by ``N_i^{-1}(I - K_i)``; a server-side rescaling that does not
    depend on the client leaves this point unchanged.

    Raises ``NotContractiveError`` when ``||sum w_i K_i||_2 >= 1`` (checked
    for the uncorrected operator only).
    """
    ks, lrs, steps, preconds = _operator_matrices(family, lrs, steps, preconds)
    d = family.dim
    if not corrected:
        k_bar = sum(w * k for w, k in zip(family.w, ks))
        norm = float(np.linalg.norm(k_bar, 2))
        if norm >= 1.0:
            raise NotContractiveError(norm)
    lhs = np.zeros((d, d))
    rhs = np.zeros(d)
    for i in range(family.num_clients):
        weight = np.eye(d) - ks[i]
        if corrected:
            p = preconds[i]
            p = np.ones(d) if p is None else np.asarray(p, dtype=float)
            if p.ndim != 1:
                raise ValueError("corrected fixed point needs diagonal preconditioners")
            weight = weight / (lrs[i] * steps[i] * p)[:, None]
        lhs += family.w[i] * weight
        rhs += family.w[i] * weight @ local_min(family, i)
    return _solve(lhs, rhs, "fixed-point system")


def limiting_fixed_point(family, gammas, steps, preconds=None) -> np.ndarray:
    """Limit of the uncorrected fixed point as ``eta_i = gamma_i * eta`` and ``eta -> 0``."""
    m, d = family.num_clients, family.dim
    gammas = per_client(gammas, m, "gammas")
    steps = per_client(steps, m, "steps")
    preconds = [None] * m if preconds is None else _per_client_list(preconds, m)
    lhs = np.zeros((d, d))
    rhs = np.zeros(d)
    for i in range(m):
        a = family.w[i] * gammas[i] * steps[i] * _precond_matrix(preconds[i], d) @ family.H[i]
        lhs += a
        rhs += a @ local_min(family, i)
    return _solve(lhs, rhs, "limiting fixed-point system")


def skew_residual(family, lrs, steps, preconds, x) -> np.ndarray:
    """``x - A(x) = sum_i w_i [I - K_i] H_i^{-1} grad F_i(x)`` in closed form."""
    ks, *_ = _operator_matrices(family, lrs, steps, preconds)
    x = np.asarray(x, dtype=float)
    out = np.zeros(family.dim)
    for i in range(family.num_clients):
        out += family.w[i] * (np.eye(family.dim) - ks[i]) @ np.linalg.solve(family.H[i], quad_grad(family, i, x))
    return out


# ---------------------------------------------------------------- noise


@dataclass(frozen=True)
class NoiseModel:
    """Gradient noise: additive isotropic Gaussian (``sigma``) or minibatching (``batch_size``)."""

    sigma: float = 0.0
    batch_size: int | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.batch_size is not None:
            if self.sigma != 0.0:
                raise ValueError("choose either Gaussian noise or minibatching, not both")
            if self.batch_size < 1:
                raise ValueError("batch_size must be >= 1")

    @property
    def deterministic(self) -> bool:
        return self.sigma == 0.0 and self.batch_size is None


def noisy_grad(g, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """``g + sigma * z`` with ``z`` standard normal, so ``E||out - g||^2 = sigma^2 d``."""
    g = np.asarray(g, dtype=float)
    if noise.sigma == 0.0:
        return g
    return g + noise.sigma * rng.standard_normal(g.shape)


# ---------------------------------------------------------------- logistic regression


@dataclass(frozen=True)
class LogRegTask:
    features: tuple  # per client (n_i, d)
    labels: tuple  # per client, values in {0, 1}
    l2: float = 1e-3
    skew: float = 0.0
    w: np.ndarray | None = None

    def __post_init__(self):
        if self.l2 < 0:
            raise ValueError("l2 must be >= 0")
        if len(self.features) != len(self.labels) or len(self.features) == 0:
            raise ValueError("need matching, non-empty per-client features and labels")
        for x, y in zip(self.features, self.labels):
            if len(y) == 0:
                raise ValueError("empty client shard")
            if x.shape[0] != len(y):
                raise ValueError("features and labels disagree in length")
        if self.w is None:
            sizes = np.array([len(y) for y in self.labels], dtype=float)
            object.__setattr__(self, "w", sizes / sizes.sum())

    @property
    def num_clients(self) -> int:
        return len(self.features)

    @property
    def dim(self) -> int:
        return self.features[0].shape[1]


def make_logreg(
    seed: int,
    num_clients: int,
    n_per_client: int,
    dim: int,
    skew: float = 0.0,
    l2: float = 1e-3,
    separation: float = 1.0,
    scale_ratio: float = 10.0,
) -> LogRegTask:
    """Synthetic federated binary classification.

    Features are class-conditional Gaussians ``(+-mu + z) * scales`` with
    per-feature scales spread log-uniformly over ``[1/scale_ratio, 1]``, which
    makes the problem anisotropic. ``skew`` in [0, 1] sets label imbalance per
    client: 0 gives balanced shards, 1 gives single-class shards; in between,
    each client's positive fraction is drawn from Beta(a, a) with
    ``a = (1 - skew) / skew``.
    """
    if not 0.0 <= skew <= 1.0:
        raise ValueError("skew must lie in [0, 1]")
    if n_per_client < 1:
        raise ValueError("empty client shard")
    rng = np.random.default_rng(seed)
    mu = rng.standard_normal(dim)
    mu *= separation / np.linalg.norm(mu)
    scales = np.logspace(0.0, -np.log10(scale_ratio), dim) if dim > 1 else np.ones(1)
    feats, labels = [], []
    for i in range(num_clients):
        if skew == 0.0:
            frac = 0.5
        elif skew >= 1.0:
            frac = float(i % 2)
        else:
            a = (1.0 - skew) / skew
            frac = rng.beta(a, a)
        n_pos = int(round(frac * n_per_client))
        y = np.zeros(n_per_client)
        y[:n_pos] = 1.0
        sign = 2.0 * y - 1.0
        x = (sign[:, None] * mu + rng.standard_normal((n_per_client, dim))) * scales
        feats.append(x)
        labels.append(y)
    return LogRegTask(features=tuple(feats), labels=tuple(labels), l2=l2, skew=skew)


def logreg_loss(task: LogRegTask, i: int, x) -> float:
    z = task.features[i] @ np.asarray(x, dtype=float)
    s = 2.0 * task.labels[i] - 1.0
    return float(np.mean(np.logaddexp(0.0, -s * z)) + 0.5 * task.l2 * np.dot(x, x))


def logreg_grad(task: LogRegTask, i: int, x, batch: int | None = None, rng=None) -> np.ndarray:
    """Client ``i`` gradient; full batch when ``batch`` is None or covers the shard."""
    x = np.asarray(x, dtype=float)
    feats, labels = task.features[i], task.labels[i]
    n = len(labels)
    if batch is not None and batch < n:
        if rng is None:
            raise ValueError("minibatch gradients need an rng")
        idx = rng.choice(n, size=batch, replace=False)
        feats, labels = feats[idx], labels[idx]
    s = 2.0 * labels - 1.0
    coef = -s * expit(-s * (feats @ x))
    return feats.T @ coef / len(labels) + task.l2 * x


def logreg_smoothness(task: LogRegTask) -> float:
    """Largest client smoothness constant ``lambda_max(X'X)/(4n) + l2``."""
    return max(
        np.linalg.eigvalsh(x.T @ x / (4.0 * len(x)))[-1] + task.l2 for x in task.features
    )


# ---------------------------------------------------------------- generic access


def client_oracle(problem, i: int, noise: NoiseModel | None = None):
    """Gradient oracle ``g(x, rng)`` for client ``i`` of either problem family."""
    noise = noise or NoiseModel()
    if isinstance(problem, QuadraticFamily):
        if noise.batch_size is not None:
            raise ValueError("minibatch noise is undefined for quadratic families")

        def oracle(x, rng):
            return noisy_grad(quad_grad(problem, i, x), noise, rng)

        return oracle
    if isinstance(problem, LogRegTask):

        def oracle(x, rng):
            g = logreg_grad(problem, i, x, batch=noise.batch_size, rng=rng)
            return noisy_grad(g, noise, rng)

        return oracle
    raise TypeError(f"unsupported problem type {type(problem).__name__}")


def global_loss(problem, x) -> float:
    loss = quad_loss if isinstance(problem, QuadraticFamily) else logreg_loss
    return float(sum(problem.w[i] * loss(problem, i, x) for i in range(problem.num_clients)))


def global_grad(problem, x) -> np.ndarray:
    if isinstance(problem, QuadraticFamily):
        return sum(problem.w[i] * quad_grad(problem, i, x) for i in range(problem.num_clients))
    return sum(problem.w[i] * logreg_grad(problem, i, x) for i in range(problem.num_clients))


def problem_minimum(problem) -> tuple[np.ndarray, float]:
    """Global minimizer and minimum value (direct solve or L-BFGS)."""
    if isinstance(problem, QuadraticFamily):
        x = global_min(problem)
        return x, global_loss(problem, x)
    res = minimize(
        lambda z: global_loss(problem, z),
        np.zeros(problem.dim),
        jac=lambda z: global_grad(problem, z),
        method="L-BFGS-B",
        options={"gtol": 1e-12, "ftol": 1e-15, "maxiter": 10_000},
    )
    return res.x, float(res.fun)
