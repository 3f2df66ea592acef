"""Client optimizers run for a fixed number of local steps with restarted state.

Every round a client starts from the broadcast model with a fresh optimizer
state (zero momentum, accumulator at its restart value), runs ``local_steps``
updates of the form ``x <- x - lr * P_k * m_k`` and reports the model change
together with the accumulated correction matrix ``N``. All preconditioners are
diagonal and stored as 1-D arrays.

Preconditioner convention for the adaptive kinds: ``P = v ** -0.5`` with
``v`` restarted at ``eps ** 2``. AdaGrad accumulates ``v += g**2``; Adam uses
``v = beta2 * v + (1 - beta2) * g**2``; Yogi uses the sign-controlled rule.
There is no bias correction.
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np

from fedcorrect.correction import CorrectionAccumulator, accumulate

KINDS = ("sgd", "precond_gd", "adagrad", "adam", "yogi")
ADAPTIVE_KINDS = ("adagrad", "adam", "yogi")

GradOracle = Callable[[np.ndarray, np.random.Generator], np.ndarray]


@dataclass(frozen=True)
class ClientOptKind:
    """Client optimizer variant plus its hyperparameters.

    ``preconditioner`` is only used by ``precond_gd`` and must be a positive
    1-D array (the diagonal of ``P``).
    """

    name: str
    lr: float
    local_steps: int = 1
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-7
    preconditioner: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.name not in KINDS:
            raise ValueError(f"unknown client optimizer {self.name!r}; expected one of {KINDS}")
        if not self.lr > 0:
            raise ValueError(f"client lr must be > 0, got {self.lr}")
        if int(self.local_steps) != self.local_steps or self.local_steps < 1:
            raise ValueError(f"local_steps must be an integer >= 1, got {self.local_steps}")
        if not self.eps > 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.name in ("sgd", "precond_gd"):
            if self.beta1 != 0.0:
                raise ValueError(f"{self.name} has no momentum; beta1 must be 0")
            object.__setattr__(self, "beta2", 0.0)
        if self.name == "precond_gd":
            if self.preconditioner is None:
                raise ValueError("precond_gd needs a diagonal preconditioner")
            p = np.asarray(self.preconditioner, dtype=float)
            if p.ndim != 1 or not np.all(np.isfinite(p)) or np.any(p <= 0):
                raise ValueError("preconditioner must be a finite positive 1-D diagonal")
            object.__setattr__(self, "preconditioner", p)

    @property
    def restart_constant(self) -> float:
        """Initial preconditioner value after a restart (1/eps for adaptive kinds)."""
        return 1.0 / self.eps if self.name in ADAPTIVE_KINDS else 1.0

    def with_steps(self, k: int) -> ClientOptKind:
        return replace(self, local_steps=k)


@dataclass
class ClientOptState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0


@dataclass
class LocalRunResult:
    delta: np.ndarray
    n_matrix: np.ndarray
    iterates: list[np.ndarray] | None = None
    preconditioner_trace: list[np.ndarray] | None = None


def reset_state(kind: ClientOptKind, dim: int) -> ClientOptState:
    """Fresh state for the start of a round: zero momentum, ``v = eps**2``."""
    return ClientOptState(
        m=np.zeros(dim),
        v=np.full(dim, kind.eps**2),
        step_count=0,
    )


def _check_finite(name, a):
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"non-finite values in {name}")


def step(kind: ClientOptKind, state: ClientOptState, x: np.ndarray, g: np.ndarray):
    """One local update. Returns ``(x_new, new_state, B_k)``.

    ``B_k`` is the diagonal preconditioner applied at this step. The input
    state is not modified.
    """
    x = np.asarray(x, dtype=float)
    g = np.asarray(g, dtype=float)
    if x.shape != g.shape or x.ndim != 1:
        raise ValueError(f"shape mismatch: x {x.shape} vs g {g.shape}")
    if state.m.shape != x.shape:
        raise ValueError(f"state has dimension {state.m.shape[0]}, x has {x.shape[0]}")
    _check_finite("x", x)
    _check_finite("gradient", g)

    g2 = g * g
    v = state.v
    if kind.name == "sgd":
        precond = np.ones_like(x)
    elif kind.name == "precond_gd":
        if kind.preconditioner.shape != x.shape:
            raise ValueError("preconditioner dimension does not match x")
        precond = kind.preconditioner.copy()
    else:
        if kind.name == "adagrad":
            v = v + g2
        elif kind.name == "adam":
            v = kind.beta2 * v + (1.0 - kind.beta2) * g2
        else:
            v = v - (1.0 - kind.beta2) * np.sign(v - g2) * g2
        if np.any(v <= 0):
            raise FloatingPointError("second-moment accumulator reached zero")
        precond = v**-0.5

    m = kind.beta1 * state.m + (1.0 - kind.beta1) * g
    x_new = x - kind.lr * precond * m
    _check_finite("updated model", x_new)
    return x_new, ClientOptState(m=m, v=v, step_count=state.step_count + 1), precond


def run_local(
    kind: ClientOptKind,
    grad_oracle: GradOracle,
    x0: np.ndarray,
    rng: np.random.Generator | None = None,
    record: bool = False,
) -> LocalRunResult:
    """Apply the client operator: ``local_steps`` updates from ``x0``.

    ``grad_oracle(x, rng)`` returns a (possibly stochastic) gradient. The
    returned ``n_matrix`` is ``lr * sum_k M_k`` with ``M_k`` the
    momentum-weighted preconditioners, so for SGD it equals ``lr * tau``.
    """
    x0 = np.asarray(x0, dtype=float)
    _check_finite("start point", x0)
    if rng is None:
        rng = np.random.default_rng(0)
    state = reset_state(kind, x0.shape[0])
    acc = CorrectionAccumulator.empty(x0.shape[0])
    x = x0.copy()
    iterates = [x0.copy()] if record else None
    trace = [] if record else None
    for _ in range(kind.local_steps):
        g = grad_oracle(x, rng)
        x, state, b = step(kind, state, x, g)
        acc = accumulate(acc, b, kind.beta1)
        if record:
            iterates.append(x.copy())
            trace.append(b)
    return LocalRunResult(
        delta=x0 - x,
        n_matrix=kind.lr * acc.N,
        iterates=iterates,
        preconditioner_trace=trace,
    )
