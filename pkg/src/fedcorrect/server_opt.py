"""Server side of a round: client sampling, aggregation and the server optimizer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SERVER_KINDS = ("gd", "adagrad", "adam")


@dataclass(frozen=True)
class ServerOptKind:
    name: str = "gd"
    lr: float = 1.0
    eps: float = 1e-3
    beta1: float = 0.0
    beta2: float = 0.99

    def __post_init__(self):
        if self.name not in SERVER_KINDS:
            raise ValueError(f"unknown server optimizer {self.name!r}; expected one of {SERVER_KINDS}")
        if not self.lr > 0:
            raise ValueError(f"server lr must be > 0, got {self.lr}")
        if not self.eps > 0:
            raise ValueError(f"server eps must be > 0, got {self.eps}")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("server beta1 and beta2 must lie in [0, 1)")


@dataclass
class ServerState:
    m: np.ndarray
    v: np.ndarray
    round: int = 0

    @classmethod
    def initial(cls, kind: ServerOptKind, dim: int) -> ServerState:
        # Same restart convention as the clients: v starts at eps**2.
        return cls(m=np.zeros(dim), v=np.full(dim, kind.eps**2), round=0)


def aggregate(deltas, weights) -> np.ndarray:
    """Weighted sum of client changes, reduced in the given (ascending id) order."""
    if len(deltas) == 0:
        raise ValueError("cannot aggregate an empty client set")
    if len(deltas) != len(weights):
        raise ValueError("deltas and weights differ in length")
    out = np.zeros_like(np.asarray(deltas[0], dtype=float))
    for delta, w in zip(deltas, weights):
        delta = np.asarray(delta, dtype=float)
        if delta.shape != out.shape:
            raise ValueError("client deltas have mismatched dimensions")
        out = out + w * delta
    return out


def server_step(kind: ServerOptKind, state: ServerState, x, pseudo_grad, lr: float | None = None):
    """Treat the aggregated change as a gradient and take one server step.

    ``lr`` overrides ``kind.lr`` for scheduled server learning rates.
    """
    x = np.asarray(x, dtype=float)
    pg = np.asarray(pseudo_grad, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(pg))):
        raise FloatingPointError("non-finite model or pseudo-gradient at the server")
    alpha = kind.lr if lr is None else lr
    if kind.name == "gd":
        return x - alpha * pg, ServerState(m=state.m, v=state.v, round=state.round + 1)

    g2 = pg * pg
    if kind.name == "adagrad":
        v = state.v + g2
    else:
        v = kind.beta2 * state.v + (1.0 - kind.beta2) * g2
    m = kind.beta1 * state.m + (1.0 - kind.beta1) * pg
    x_new = x - alpha * m * v**-0.5
    return x_new, ServerState(m=m, v=v, round=state.round + 1)


def sample_clients(num_clients: int, per_round: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample without replacement, sorted ascending."""
    if not 1 <= per_round <= num_clients:
        raise ValueError(f"need 1 <= clients_per_round <= {num_clients}, got {per_round}")
    if per_round == num_clients:
        return list(range(num_clients))
    picked = rng.choice(num_clients, size=per_round, replace=False)
    return sorted(int(i) for i in picked)
