"""Diagnostics for the round operator and the convergence bounds it obeys.

Contraction and cumulative-variance constants of a client operator are
estimated by Monte Carlo (with closed forms for plain SGD), and the explicit
error bound toward the fixed point, the learning-rate prescription for
locally corrected training, and the decaying server learning rate are
evaluated directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from fedcorrect.client_opt import ClientOptKind, run_local
from fedcorrect.problems import NoiseModel, client_oracle, global_grad


def _trial_seeds(rng: np.random.Generator, trials: int) -> list[int]:
    return [int(s) for s in rng.integers(0, 2**63 - 1, size=trials)]


# ---------------------------------------------------------------- closed forms


def sgd_h(lr: float, mu: float, k: int) -> float:
    """Contraction constant ``(1 - lr*mu)^(2k)`` of ``k`` SGD steps on a mu-strongly convex objective."""
    if not 0.0 < lr * mu < 1.0:
        raise ValueError(f"need 0 < lr*mu < 1, got {lr * mu}")
    return (1.0 - lr * mu) ** (2 * k)


def sgd_q(lr: float, k: int) -> float:
    """Cumulative variance factor ``k * lr^2`` (per unit gradient variance)."""
    return k * lr**2


# ---------------------------------------------------------------- reports


@dataclass
class ContractionReport:
    k: int
    h_hat: float
    h_closed_form: float | None = None
    ratios: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"type": "contraction", **asdict(self)}


@dataclass
class VarianceReport:
    k: int
    q_hat: float
    q_bound: float
    sigma: float
    std_error: float = 0.0

    def to_dict(self) -> dict:
        return {"type": "variance", **asdict(self)}


@dataclass
class BoundInputs:
    h: list[float]
    q: list[float]
    w: list[float]
    sigma: float
    x0_err: float
    T: int

    def __post_init__(self):
        if not len(self.h) == len(self.q) == len(self.w):
            raise ValueError("h, q and w need one entry per client")
        s = self.contraction
        if not 0.0 < s < 1.0:
            raise ValueError(f"weighted contraction sum(w*h) must lie in (0, 1), got {s}")
        if self.T < 1:
            raise ValueError("T must be >= 1")

    @property
    def contraction(self) -> float:
        return float(np.dot(self.w, self.h))

    def to_dict(self) -> dict:
        return {"type": "bound_inputs", **asdict(self)}


# ---------------------------------------------------------------- estimators


def estimate_h(
    kind: ClientOptKind,
    problem,
    i: int,
    k: int,
    x,
    y,
    trials: int = 1,
    rng: np.random.Generator | None = None,
    noise: NoiseModel | None = None,
    closed_form: float | None = None,
) -> ContractionReport:
    """``||mean A_i(x;k) - mean A_i(y;k)||^2 / ||x - y||^2`` over paired trials.

    The x-run and y-run of a trial consume identical random streams, so both
    see the same minibatches or noise draws.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    gap = float(np.sum((x - y) ** 2))
    if gap == 0.0:
        raise ValueError("x and y must differ")
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if k == 0:
        return ContractionReport(k=0, h_hat=1.0, h_closed_form=closed_form, ratios=[1.0] * trials)
    rng = rng if rng is not None else np.random.default_rng(0)
    kind_k = kind.with_steps(k)
    oracle = client_oracle(problem, i, noise)
    sum_x = np.zeros_like(x)
    sum_y = np.zeros_like(y)
    ratios = []
    for seed in _trial_seeds(rng, trials):
        ax = x - run_local(kind_k, oracle, x, np.random.default_rng(seed)).delta
        ay = y - run_local(kind_k, oracle, y, np.random.default_rng(seed)).delta
        sum_x += ax
        sum_y += ay
        ratios.append(float(np.sum((ax - ay) ** 2)) / gap)
    h_hat = float(np.sum((sum_x / trials - sum_y / trials) ** 2)) / gap
    return ContractionReport(k=k, h_hat=h_hat, h_closed_form=closed_form, ratios=ratios)


def gradient_variance(problem, i: int, x, noise: NoiseModel, trials: int, rng) -> float:
    """Total per-step gradient variance ``E||g - grad F_i||^2`` at ``x``."""
    x = np.asarray(x, dtype=float)
    if noise.deterministic:
        return 0.0
    if noise.batch_size is None:
        return noise.sigma**2 * x.shape[0]
    oracle = client_oracle(problem, i, noise)
    full = client_oracle(problem, i, NoiseModel())(x, rng)
    draws = np.array([oracle(x, rng) for _ in range(trials)])
    return float(np.mean(np.sum((draws - full) ** 2, axis=1)))


def estimate_q(
    kind: ClientOptKind,
    problem,
    i: int,
    k: int,
    x,
    noise: NoiseModel,
    trials: int = 1000,
    rng: np.random.Generator | None = None,
) -> VarianceReport:
    """Monte-Carlo ``E||A_i(x;k) - E A_i(x;k)||^2 / sigma^2``.

    ``sigma^2`` is the total per-step gradient variance (``sigma_noise^2 * d``
    for Gaussian noise), so ``q_hat`` is directly comparable to ``k * lr^2``.
    ``std_error`` is the Monte-Carlo standard error of ``q_hat``.
    """
    x = np.asarray(x, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(0)
    var = gradient_variance(problem, i, x, noise, trials, rng)
    sigma = float(np.sqrt(var))
    q_bound = sgd_q(kind.lr, k)
    if var == 0.0 or k == 0:
        return VarianceReport(k=k, q_hat=0.0, q_bound=q_bound, sigma=sigma)
    if trials < 2:
        raise ValueError("need at least two trials to estimate a variance")
    kind_k = kind.with_steps(k)
    oracle = client_oracle(problem, i, noise)
    outs = np.array(
        [x - run_local(kind_k, oracle, x, np.random.default_rng(s)).delta for s in _trial_seeds(rng, trials)]
    )
    sq = np.sum((outs - outs.mean(axis=0)) ** 2, axis=1)
    scale = trials / (trials - 1)
    q_hat = float(np.mean(sq) * scale / var)
    se = float(np.std(sq, ddof=1) * scale / np.sqrt(trials) / var)
    return VarianceReport(k=k, q_hat=q_hat, q_bound=q_bound, sigma=sigma, std_error=se)


def residual_landscape(round_operator, grid, trials: int = 1, rng=None):
    """``[(x, ||x - E[A(x)]||)]`` for every grid point.

    ``round_operator(x, rng)`` returns one draw of ``A(x)``; the expectation
    is a Monte-Carlo mean over ``trials`` draws (exact when deterministic).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    out = []
    for x in grid:
        x = np.asarray(x, dtype=float)
        mean = np.zeros_like(x)
        for seed in _trial_seeds(rng, trials):
            mean += round_operator(x, np.random.default_rng(seed))
        out.append((x, float(np.linalg.norm(x - mean / trials))))
    return out


# ---------------------------------------------------------------- bounds and schedules


def error_bound(inputs: BoundInputs) -> float:
    """Explicit bound on ``E||x_T - x_fixed||^2``.

    ``32 r0 s^(T/2) / (1 - s) + 36 sigma^2 sum(w^2 q) / (T (1 - s)^2)`` with
    ``s = sum(w h)`` and ``r0 = ||x_0 - x_fixed||^2``.
    """
    s = inputs.contraction
    w = np.asarray(inputs.w, dtype=float)
    q = np.asarray(inputs.q, dtype=float)
    transient = 32.0 * inputs.x0_err / (1.0 - s) * s ** (inputs.T / 2.0)
    noise = 36.0 * inputs.sigma**2 * float(np.sum(w**2 * q)) / (inputs.T * (1.0 - s) ** 2)
    return transient + noise


def horizon_server_lr(inputs: BoundInputs) -> float:
    """Constant server lr for which ``error_bound(inputs)`` is guaranteed at horizon ``T``.

    ``min(1, ln(max(2, a^2 r0 T^2 / c)) / (a T))`` with ``a = 1 - sum(w h)`` and
    ``c = sigma^2 sum(w^2 q)``; deterministic clients (``c = 0``) get 1.
    """
    a = 1.0 - inputs.contraction
    c = inputs.sigma**2 * float(np.sum(np.asarray(inputs.w) ** 2 * np.asarray(inputs.q)))
    if c == 0.0:
        return 1.0
    T = inputs.T
    return min(1.0, np.log(max(2.0, a**2 * inputs.x0_err * T**2 / c)) / (a * T))


def local_correction_lrs(tau: int, L: float, Lambda: float, G: float, D: float, T: int) -> tuple[float, float]:
    """Client and server learning rates for locally corrected training over ``T`` rounds.

    ``eta = min(1/(tau L), (D / (L^2 Lambda G^2))^(1/3) / (tau T^(1/3)))`` and
    ``alpha = eta * tau`` (so ``alpha <= 1/L``).
    """
    if min(tau, L, Lambda, G, T) <= 0 or D < 0:
        raise ValueError("tau, L, Lambda, G and T must be positive and D non-negative")
    eta = min(1.0 / (tau * L), (D / (L**2 * Lambda * G**2)) ** (1.0 / 3.0) / (tau * T ** (1.0 / 3.0)))
    return eta, eta * tau


def _one_minus_h(lr, mu, tau):
    return 1.0 - (1.0 - lr * mu) ** (2 * tau)


def decaying_server_lr(t: int, lr: float, mu: float, tau: int, beta: float) -> float:
    """``alpha_t = 2 / [(1 - (1 - lr mu)^(2 tau)) (t + beta)]``."""
    if beta <= 0:
        raise ValueError("beta must be > 0")
    if not 0.0 < lr * mu < 1.0:
        raise ValueError(f"need 0 < lr*mu < 1, got {lr * mu}")
    return 2.0 / (_one_minus_h(lr, mu, tau) * (t + beta))


def decaying_server_lr_beta_cap(sigma: float, lr: float, mu: float, tau: int, x0_err: float, num_clients: int = 1) -> float:
    """Largest ``beta`` for which the decaying schedule's guarantee holds at ``t = 0``.

    ``4 sigma^2 lr^2 tau / (M (1 - (1 - lr mu)^(2 tau))^2 ||x_0 - x_fixed||^2)``.
    """
    if x0_err <= 0:
        return float("inf")
    a = _one_minus_h(lr, mu, tau)
    return 4.0 * sigma**2 * lr**2 * tau / (num_clients * a**2 * x0_err)


def rate_factor(x: float, tau: int) -> float:
    """``z(x) = 2 x tau / (1 - (1 - x)^(2 tau))``, the constant in the local SGD rate."""
    return 2.0 * x * tau / (1.0 - (1.0 - x) ** (2 * tau))


def min_grad_norm_sq(problem, iterates) -> float:
    """``min_t ||grad F(x_t)||^2`` over a trajectory."""
    return min(float(np.sum(global_grad(problem, x) ** 2)) for x in iterates)
