"""Average AoI of gated CTM / CTM-ET under Bernoulli traffic.

The analysis follows one tagged user across refresh cycles.  A cycle starts
with a CRI pair ``(C0, C1)``: the user generates during ``C0`` and is decoded
in ``C1``.  Conditional moments of the inter-refresh time given ``len(C1)`` come
from first-step linear systems over the CRI-length chain; the reset value is
``Z = X + D`` with ``X`` the residual age accumulated in ``C0`` and ``D`` the
decode slot within ``C1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .markov import (
    ProtocolConfig,
    contender_matrix,
    generation_prob,
    stationary_for,
    truncated_cri_pmfs,
)
from .pgf import decode_slot_pmfs, unresolved_probs

__all__ = [
    "Chain",
    "RefreshPairLaw",
    "RefreshMoments",
    "AoiReport",
    "DegenerateConfigError",
    "SingularSystemError",
    "build_chain",
    "refresh_pair_law",
    "inter_refresh_moments",
    "age_reset_expectation",
    "residual_age_expectations",
    "decode_delay_expectations",
    "average_aoi",
    "delivery_rate",
    "mean_delay",
    "slotted_aloha_aoi",
    "optimize_lmax",
    "PLAIN",
]

PLAIN = None  # l_max sentinel for plain CTM


class DegenerateConfigError(ValueError):
    """No deliveries ever happen (rho == 0), so AoI is undefined."""


class SingularSystemError(RuntimeError):
    pass


@dataclass(frozen=True)
class Chain:
    """Per-config numerical ingredients shared by every quantity below.

    Arrays are indexed by CRI length minus one (``n = l_max`` states) and by
    the number ``m`` of *other* contenders (``0..U-1``).
    """

    cfg: ProtocolConfig
    kernel: np.ndarray  # (n, n)
    pi: np.ndarray  # (n,)
    gamma: np.ndarray  # (n,) Gamma_l
    others: np.ndarray  # (n, U) p_{M|L}(m | l)
    cri_pmf: np.ndarray  # (U+1, n) p_{L|U}(l | u), tail at l_max
    decode_pmf: np.ndarray  # (U, n) p_{D~|M}(d | m) for d = 1..l_max, exact
    phi: np.ndarray  # (U,)

    @property
    def n(self) -> int:
        return self.pi.size

    @property
    def lengths(self) -> np.ndarray:
        return np.arange(1, self.n + 1, dtype=float)


def build_chain(cfg: ProtocolConfig) -> Chain:
    if cfg.rho <= 0.0:
        raise DegenerateConfigError("rho = 0: no packets are generated, AoI is undefined")
    n = cfg.states
    U = cfg.users
    kernel, pi = stationary_for(cfg)
    gamma = generation_prob(cfg.rho, np.arange(1, n + 1))
    return Chain(
        cfg=cfg,
        kernel=kernel.matrix,
        pi=pi.probs,
        gamma=gamma,
        others=contender_matrix(U - 1, gamma),
        cri_pmf=truncated_cri_pmfs(U, n),
        decode_pmf=decode_slot_pmfs(U - 1, n + 1)[:, :n],
        phi=unresolved_probs(U - 1, n),
    )


def _chain(obj) -> Chain:
    return obj if isinstance(obj, Chain) else build_chain(obj)


@dataclass(frozen=True)
class RefreshPairLaw:
    """Joint law of the (generating, delivering) CRI lengths opening a refresh cycle."""

    theta: np.ndarray
    joint: np.ndarray
    normalizer: float

    @property
    def first(self) -> np.ndarray:
        """Marginal of the generating CRI length."""
        return self.joint.sum(axis=1)

    @property
    def second(self) -> np.ndarray:
        """Marginal of the delivering CRI length."""
        return self.joint.sum(axis=0)


def refresh_pair_law(cfg) -> RefreshPairLaw:
    ch = _chain(cfg)
    # delivery law of C1 given m others: all resolved below l_max; at l_max
    # subtract the tagged user being left undecoded
    deliver = ch.cri_pmf[1:, :].copy()  # row m -> m+1 contenders
    deliver[:, -1] = np.clip(deliver[:, -1] - ch.phi, 0.0, None)
    theta = (ch.pi * ch.gamma)[:, None] * (ch.others @ deliver)
    total = float(theta.sum())
    if total <= 0.0:
        raise DegenerateConfigError("no refresh events have positive probability")
    return RefreshPairLaw(theta=theta, joint=theta / total, normalizer=total)


@dataclass(frozen=True)
class RefreshMoments:
    """First and second moments of the inter-refresh time given ``len(C1)``."""

    first: np.ndarray
    second: np.ndarray
    continuation: np.ndarray  # Q: one-step continuation matrix of the cycle

    def alpha(self, l1: int, l: int) -> float:
        return 2.0 * l1 * self.first[l - 1] + self.second[l - 1]


def _continuation(ch: Chain) -> np.ndarray:
    """``Q[a, b]``: after a CRI of length ``a`` the cycle continues with one of length ``b``."""
    idle = (1.0 - ch.gamma)[:, None] * (ch.others @ ch.cri_pmf[:-1, :])
    Q = idle
    Q[:, -1] += ch.gamma * (ch.others @ ch.phi)
    return Q


def inter_refresh_moments(cfg) -> RefreshMoments:
    ch = _chain(cfg)
    Q = _continuation(ch)
    A = np.eye(ch.n) - Q
    ell = ch.lengths
    try:
        y1 = np.linalg.solve(A, ell)
        y2 = np.linalg.solve(A, ell**2 + 2.0 * ell * (Q @ y1))
    except np.linalg.LinAlgError as exc:
        raise SingularSystemError(f"inter-refresh system singular (cond={np.linalg.cond(A):.3g})") from exc
    if not (np.all(np.isfinite(y1)) and np.all(np.isfinite(y2))):
        raise SingularSystemError(f"inter-refresh system ill-conditioned (cond={np.linalg.cond(A):.3g})")
    return RefreshMoments(first=y1, second=y2, continuation=Q)


def residual_age_expectations(cfg) -> np.ndarray:
    """``E[X | len(C0) = l]`` for every state, ``X`` counted back from the end of ``C0``."""
    ch = _chain(cfg)
    rho = ch.cfg.rho
    n = ch.n
    x = np.arange(1, n + 1, dtype=float)
    w = rho * (1.0 - rho) ** (x - 1)
    return np.cumsum(x * w) / np.cumsum(w)


def decode_delay_expectations(cfg) -> np.ndarray:
    """``E[D | len(C0) = l]``: decode slot in ``C1`` given the generating CRI length."""
    ch = _chain(cfg)
    law = ch.others @ ch.decode_pmf  # (n, n): row l0, column d
    return (law @ ch.lengths) / law.sum(axis=1)


def age_reset_expectation(cfg, l0: int) -> float:
    ch = _chain(cfg)
    if not 1 <= l0 <= ch.n:
        raise ValueError(f"l0 must lie in 1..{ch.n}")
    return float(residual_age_expectations(ch)[l0 - 1] + decode_delay_expectations(ch)[l0 - 1])


@dataclass(frozen=True)
class AoiReport:
    cfg: ProtocolConfig
    delta: float
    mean_y: float
    mean_y2: float
    mean_zy: float
    mean_x: float
    mean_d: float
    delivery_rate: float
    states: int

    @property
    def delta_norm(self) -> float:
        return self.delta / self.cfg.users

    @property
    def mean_z(self) -> float:
        return self.mean_x + self.mean_d


def average_aoi(cfg) -> AoiReport:
    ch = _chain(cfg)
    law = refresh_pair_law(ch)
    mom = inter_refresh_moments(ch)
    ex = residual_age_expectations(ch)
    ed = decode_delay_expectations(ch)
    p1 = law.second
    p0 = law.first
    mean_y = float(p1 @ mom.first)
    mean_y2 = float(p1 @ mom.second)
    mean_zy = float((ex + ed) @ law.joint @ mom.first)
    delta = (mean_zy + mean_y2 / 2.0) / mean_y
    return AoiReport(
        cfg=ch.cfg,
        delta=delta,
        mean_y=mean_y,
        mean_y2=mean_y2,
        mean_zy=mean_zy,
        mean_x=float(p0 @ ex),
        mean_d=float(p0 @ ed),
        delivery_rate=_delivery_rate(ch, law),
        states=ch.n,
    )


def _delivery_rate(ch: Chain, law: RefreshPairLaw) -> float:
    return min(1.0, law.normalizer / float(ch.pi @ ch.gamma))


def delivery_rate(cfg) -> float:
    """Fraction of packets entering contention that are delivered."""
    ch = _chain(cfg)
    return _delivery_rate(ch, refresh_pair_law(ch))


def mean_delay(cfg) -> float:
    """``E[D]`` of delivered packets, unconditioned over the generating CRI length."""
    ch = _chain(cfg)
    return float(refresh_pair_law(ch).first @ decode_delay_expectations(ch))


def slotted_aloha_aoi(users: int, rho: float) -> float:
    """Average AoI of slotted ALOHA with per-slot transmission probability ``rho``."""
    if not 0.0 < rho < 1.0 and not (users == 1 and rho == 1.0):
        raise ValueError("rho must lie in (0, 1)")
    return 0.5 + 1.0 / (rho * (1.0 - rho) ** (users - 1))


TIE_RTOL = 1e-12


def _lmax_key(l_max: int | None) -> float:
    return math.inf if l_max is None else float(l_max)


def optimize_lmax(
    users: int,
    rho: float,
    lmax_grid: Iterable[int | None],
) -> tuple[int | None, float, dict[int | None, float]]:
    """Minimize the average AoI over truncation lengths.

    ``None`` in the grid stands for plain CTM.  Ties go to the larger ``l_max``.
    Returns ``(best, delta_best, delta_by_lmax)``.
    """
    grid: Sequence[int | None] = list(dict.fromkeys(lmax_grid))
    if not grid:
        raise ValueError("lmax grid must not be empty")
    deltas = {lm: average_aoi(ProtocolConfig(users, rho, lm)).delta for lm in grid}
    floor = min(deltas.values())
    # values within float noise of the minimum count as ties
    tied = [lm for lm in grid if deltas[lm] <= floor * (1 + TIE_RTOL)]
    best = max(tied, key=_lmax_key)
    return best, deltas[best], deltas
