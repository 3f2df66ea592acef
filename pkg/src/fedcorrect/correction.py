"""Local and global correction of client model changes.

Local correction divides each client's change by its accumulated
preconditioner mass ``N_i``; global correction rescales the aggregate by
``N_s^{-1}`` with ``N_s = sum_i w_i N_i^{-1}``. Everything is diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

# Components of N below this are treated as broken accounting, never clamped.
N_FLOOR = 1e-12


class CorrectionError(ValueError):
    pass


class CorrectionMode(str, Enum):
    NONE = "none"
    LOCAL = "local"
    JOINT = "joint"

    @property
    def local(self) -> bool:
        return self is not CorrectionMode.NONE


@dataclass(frozen=True)
class CorrectionAccumulator:
    M: np.ndarray
    N: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> CorrectionAccumulator:
        return cls(M=np.zeros(dim), N=np.zeros(dim))


def accumulate(acc: CorrectionAccumulator, b_k: np.ndarray, beta1: float) -> CorrectionAccumulator:
    """``M <- beta1 M + (1 - beta1) B_k``; ``N <- N + M``."""
    m = beta1 * acc.M + (1.0 - beta1) * np.asarray(b_k, dtype=float)
    return CorrectionAccumulator(M=m, N=acc.N + m)


def _check_n(n, what):
    n = np.asarray(n, dtype=float)
    if not np.all(np.isfinite(n)) or np.any(n < N_FLOOR):
        raise CorrectionError(
            f"{what} has components below {N_FLOOR:g} (min {np.min(n):.3g}); "
            "no local progress, diverging gradients or broken correction accounting"
        )
    return n


def apply_local(delta: np.ndarray, n: np.ndarray) -> np.ndarray:
    return np.asarray(delta, dtype=float) / _check_n(n, "N_i")


def aggregate_global_norm(n_list, weights) -> np.ndarray:
    """``N_s = sum_i w_i / N_i``, reduced in list order."""
    if len(n_list) == 0:
        raise CorrectionError("cannot build N_s from an empty client set")
    if len(n_list) != len(weights):
        raise ValueError("n_list and weights differ in length")
    out = np.zeros_like(np.asarray(n_list[0], dtype=float))
    for n, w in zip(n_list, weights):
        out = out + w / _check_n(n, "N_i")
    return out


def apply_global(delta_agg: np.ndarray, n_s: np.ndarray) -> np.ndarray:
    return np.asarray(delta_agg, dtype=float) / _check_n(n_s, "N_s")


def joint_aggregate(deltas, n_list, weights) -> np.ndarray:
    """Locally and globally corrected aggregate ``N_s^{-1} sum_i w_i N_i^{-1} delta_i``.

    Evaluated relative to the first client's ``N`` as
    ``(sum_i w_i r_i delta_i) * (sum_i w_i) / (sum_i w_i r_i)`` with
    ``r_i = N_0 / N_i``. This is algebraically the same quantity, but when all
    ``N_i`` coincide every ``r_i`` is exactly 1.0 and the result is bitwise
    identical to the uncorrected ``sum_i w_i delta_i``.
    """
    if len(deltas) == 0:
        raise CorrectionError("cannot aggregate an empty client set")
    if not len(deltas) == len(n_list) == len(weights):
        raise ValueError("deltas, n_list and weights differ in length")
    n_ref = _check_n(n_list[0], "N_i")
    num = np.zeros_like(n_ref)
    den = np.zeros_like(n_ref)
    wsum = 0.0
    for delta, n, w in zip(deltas, n_list, weights):
        r = n_ref / _check_n(n, "N_i")
        num = num + (w * r) * np.asarray(delta, dtype=float)
        den = den + w * r
        wsum = wsum + w
    return num * (wsum / den)
