"""Markov chain of consecutive CRI durations under gated access."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import stats

from .pgf import Pmf, cri_length_pmfs, unresolved_probs

__all__ = [
    "ProtocolConfig",
    "TransitionKernel",
    "StationaryDist",
    "ConvergenceError",
    "generation_prob",
    "contender_dist",
    "contender_matrix",
    "truncated_cri_pmf",
    "truncated_cri_pmfs",
    "transition_kernel",
    "stationary_dist",
    "stationary_for",
    "plain_cap",
]

PLAIN_TAIL_TOL = 1e-9
PLAIN_CAP_START = 128
PLAIN_CAP_LIMIT = 1 << 16


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ProtocolConfig:
    """Population size, per-slot generation probability and CRI truncation.

    ``l_max=None`` selects plain CTM (no early termination).
    """

    users: int
    rho: float
    l_max: int | None = None

    def __post_init__(self):
        if int(self.users) != self.users or self.users < 1:
            raise ValueError(f"users must be a positive integer, got {self.users!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho!r}")
        if self.l_max is not None:
            if int(self.l_max) != self.l_max or self.l_max < 2:
                raise ValueError(f"l_max must be an integer >= 2 or None, got {self.l_max!r}")
            object.__setattr__(self, "l_max", int(self.l_max))
        object.__setattr__(self, "users", int(self.users))
        object.__setattr__(self, "rho", float(self.rho))

    @classmethod
    def from_aggregate(cls, users: int, rho_u: float, l_max: int | None = None) -> "ProtocolConfig":
        return cls(users, rho_u / users, l_max)

    @property
    def plain(self) -> bool:
        return self.l_max is None

    @property
    def rho_u(self) -> float:
        return self.rho * self.users

    @property
    def states(self) -> int:
        """Number of CRI-length states used by the analysis."""
        return plain_cap(self.users) if self.l_max is None else self.l_max

    def with_lmax(self, l_max: int | None) -> "ProtocolConfig":
        return ProtocolConfig(self.users, self.rho, l_max)


@dataclass(frozen=True)
class TransitionKernel:
    """Row ``i`` is the law of the next CRI length given the current one is ``i+1``."""

    matrix: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.matrix, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1]:
            raise ValueError("kernel must be square")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-9):
            raise ValueError("kernel must be row-stochastic")
        P.setflags(write=False)
        object.__setattr__(self, "matrix", P)

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class StationaryDist:
    probs: np.ndarray

    def residual(self, kernel: TransitionKernel) -> float:
        return float(np.abs(self.probs @ kernel.matrix - self.probs).sum())

    def mean(self) -> float:
        return float(np.arange(1, self.probs.size + 1) @ self.probs)


def generation_prob(rho: float, slots) -> float | np.ndarray:
    """Probability that a user generates at least once in ``slots`` slots."""
    slots = np.asarray(slots)
    if np.any(slots < 1):
        raise ValueError("slots must be >= 1")
    # -expm1(l*log1p(-rho)) keeps precision for tiny rho
    with np.errstate(divide="ignore"):
        out = -np.expm1(slots * np.log1p(-rho)) if rho < 1.0 else np.ones(slots.shape)
    return float(out) if out.ndim == 0 else out


def contender_dist(cfg: ProtocolConfig, l_prev: int, include_reference: bool = True) -> np.ndarray:
    """Binomial law of the number of contenders after a CRI of ``l_prev`` slots.

    With ``include_reference=False`` the tagged user is excluded (``U-1`` trials).
    Entry ``k`` is the probability of ``k`` contenders.
    """
    n = cfg.users if include_reference else cfg.users - 1
    return stats.binom.pmf(np.arange(n + 1), n, generation_prob(cfg.rho, l_prev))


def contender_matrix(n: int, gammas: np.ndarray) -> np.ndarray:
    """Rows ``Bin(n, gamma)`` for each gamma; shape ``(len(gammas), n+1)``."""
    k = np.arange(n + 1)
    return stats.binom.pmf(k[None, :], n, np.asarray(gammas)[:, None])


def truncated_cri_pmfs(u_max: int, l_max: int) -> np.ndarray:
    """Early-terminated CRI length PMFs for ``u = 0..u_max`` over ``1..l_max``."""
    return cri_length_pmfs(u_max, l_max)


def truncated_cri_pmf(u: int, l_max: int) -> Pmf:
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    return Pmf.from_dense(truncated_cri_pmfs(u, l_max)[u])


@lru_cache(maxsize=None)
def plain_cap(users: int) -> int:
    """Truncation length standing in for plain CTM.

    Doubled from 128 until both the CRI-length tail for ``users`` contenders and
    the probability of a tagged user outlasting it are below 1e-9.
    """
    cap = PLAIN_CAP_START
    while cap <= PLAIN_CAP_LIMIT:
        tail = truncated_cri_pmfs(users, cap)[:, -1].max()
        phi = unresolved_probs(users - 1, cap).max()
        if tail < PLAIN_TAIL_TOL and phi < PLAIN_TAIL_TOL:
            return cap
        cap *= 2
    raise ConvergenceError(f"no plain-CTM cap below {PLAIN_CAP_LIMIT} for {users} users")


def transition_kernel(cfg: ProtocolConfig) -> TransitionKernel:
    """One-step law of consecutive CRI lengths."""
    n = cfg.states
    gam = generation_prob(cfg.rho, np.arange(1, n + 1))
    B = contender_matrix(cfg.users, gam)
    P = B @ truncated_cri_pmfs(cfg.users, n)
    P = np.clip(P, 0.0, None)
    P /= P.sum(axis=1, keepdims=True)
    return TransitionKernel(P)


def _power_iteration(P: np.ndarray, tol: float = 1e-12, max_iter: int = 10**6) -> np.ndarray:
    pi = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(max_iter):
        nxt = pi @ P
        if np.abs(nxt - pi).sum() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise ConvergenceError("power iteration did not converge")


def stationary_dist(kernel: TransitionKernel, tol: float = 1e-10) -> StationaryDist:
    """Fixed point of the kernel by direct solve, with power iteration as fallback."""
    P = kernel.matrix
    n = P.shape[0]
    A = P.T - np.eye(n)
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        pi = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        pi = None
    if pi is not None:
        pi = np.clip(pi, 0.0, None)
        pi /= pi.sum()
    if pi is None or np.abs(pi @ P - pi).sum() > tol:
        pi = _power_iteration(P)
        if np.abs(pi @ P - pi).sum() > tol:
            raise ConvergenceError("stationary distribution residual above tolerance")
    return StationaryDist(pi)


def stationary_for(cfg: ProtocolConfig) -> tuple[TransitionKernel, StationaryDist]:
    kernel = transition_kernel(cfg)
    return kernel, stationary_dist(kernel)

