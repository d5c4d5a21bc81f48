"""Generating functions of the binary tree-splitting contention interval.

Two conditional PGFs are tracked for a CRI started by ``u`` contenders:

* ``L_u(z)``: the CRI duration in slots,
* ``D_{m+1}(z)``: the slot in which a tagged contender is decoded when ``m``
  other users contend alongside it.

Both are evaluated on the unit circle and their mass functions are recovered
with an inverse FFT over ``N`` equispaced points.  ``N`` is doubled until the
aliased tail is negligible, so the low-order bins are exact to float precision.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

__all__ = [
    "Pmf",
    "PgfSampler",
    "PmfResolutionError",
    "eval_cri_pgf",
    "eval_decode_pgf",
    "cri_length_pmf",
    "decode_slot_pmf",
    "cri_length_pmfs",
    "decode_slot_pmfs",
    "unresolved_prob",
    "unresolved_probs",
]

UNIT_CIRCLE_TOL = 1e-12
TAIL_TOL = 1e-12
NEGATIVE_CLAMP = 1e-10
NOISE_FLOOR = 64 * np.finfo(float).eps
MIN_POINTS = 64
MAX_POINTS = 1 << 20
EXACT_BINOMIAL_LIMIT = 60


class PmfResolutionError(RuntimeError):
    """The inverse DFT could not isolate the tail within the sample budget."""


@dataclass(frozen=True)
class Pmf:
    """Probability mass function over consecutive positive slot counts.

    ``probs[k]`` is the probability of ``support_min + k`` slots.
    """

    support_min: int
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if self.support_min < 1:
            raise ValueError("support_min must be >= 1")
        if probs.ndim != 1 or probs.size == 0:
            raise ValueError("probs must be a nonempty 1-d array")
        if np.any(probs < 0):
            raise ValueError("probabilities must be nonnegative")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {probs.sum()!r}, not 1")
        probs.setflags(write=False)
        object.__setattr__(self, "probs", probs)

    @property
    def support(self) -> np.ndarray:
        return np.arange(self.support_min, self.support_min + self.probs.size)

    @property
    def support_max(self) -> int:
        return self.support_min + self.probs.size - 1

    def __call__(self, k: int) -> float:
        i = k - self.support_min
        if 0 <= i < self.probs.size:
            return float(self.probs[i])
        return 0.0

    def mean(self) -> float:
        return float(self.support @ self.probs)

    def second_moment(self) -> float:
        s = self.support
        return float((s * s) @ self.probs)

    def cdf(self, k: int) -> float:
        i = k - self.support_min
        if i < 0:
            return 0.0
        return float(self.probs[: i + 1].sum())

    @classmethod
    def point_mass(cls, k: int) -> "Pmf":
        return cls(k, np.ones(1))

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> "Pmf":
        """Build from an array indexed by slot count minus one, trimming zeros."""
        dense = np.asarray(dense, dtype=float)
        nz = np.flatnonzero(dense)
        lo, hi = nz[0], nz[-1]
        return cls(int(lo) + 1, dense[lo : hi + 1])


def _split_weights(n: int, scale_exp: int) -> np.ndarray:
    """``C(n, i) / 2**scale_exp`` for ``i = 0..n``."""
    if n <= EXACT_BINOMIAL_LIMIT:
        return np.array([math.comb(n, i) for i in range(n + 1)], dtype=float) / 2.0**scale_exp
    i = np.arange(n + 1)
    return np.exp(gammaln(n + 1) - gammaln(i + 1) - gammaln(n - i + 1) - scale_exp * math.log(2.0))


def _check_unit_circle(z: np.ndarray) -> None:
    if np.any(np.abs(np.abs(z) - 1.0) > UNIT_CIRCLE_TOL):
        raise ValueError("PGF sample points must lie on the unit circle")


class PgfSampler:
    """Memoized recursion tables of ``L_u`` and ``D_{m+1}`` at fixed points.

    Tables grow lazily in the contender count; every row is computed once and
    shared by every later query on the same point set.
    """

    def __init__(self, z):
        z = np.atleast_1d(np.asarray(z, dtype=complex))
        _check_unit_circle(z)
        self.z = z
        self._cri = [z.copy(), z.copy()]  # L_0 = L_1 = z
        self._decode = [None, z.copy()]  # D_1 = z; index is total contenders

    @classmethod
    def on_dft_grid(cls, n_points: int) -> "PgfSampler":
        k = np.arange(n_points)
        z = np.exp(-2j * np.pi * k / n_points)
        z[0] = 1.0
        return cls(z)

    @property
    def contender_count(self) -> int:
        return len(self._cri) - 1

    def cri(self, u: int) -> np.ndarray:
        if u < 0:
            raise ValueError("contender count must be >= 0")
        z = self.z
        while len(self._cri) <= u:
            n = len(self._cri)
            # L_n = z / (2 (1 - z^2 / 2^(n-1))) * sum_i C(n,i)/2^(n-1) L_i L_{n-i}
            w = _split_weights(n, n - 1)[1:n]
            lo = np.stack(self._cri[1:n])
            hi = np.stack(self._cri[n - 1 : 0 : -1])
            acc = np.einsum("i,ij->j", w, lo * hi)
            denom = 2.0 * (1.0 - z * z / 2.0 ** (n - 1))
            self._cri.append(z * acc / denom)
        return self._cri[u]

    def decode(self, total: int) -> np.ndarray:
        if total < 1:
            raise ValueError("total contenders must be >= 1")
        z = self.z
        self.cri(total - 1)
        while len(self._decode) <= total:
            m = len(self._decode) - 1
            # D_{m+1}: reference user plus m others; everything scaled by 2^-(m+1)
            w = _split_weights(m, m + 1)
            acc = w[m] * z * (1.0 + self._cri[m])
            for i in range(1, m):
                acc = acc + w[i] * (self._decode[i + 1] + self._cri[i] * self._decode[m - i + 1])
            denom = 1.0 - z * (z + 1.0) / 2.0 ** (m + 1)
            self._decode.append(z * acc / denom)
        return self._decode[total]


def eval_cri_pgf(u: int, z) -> complex | np.ndarray:
    """PGF of the CRI length with ``u`` contenders, at ``z`` on the unit circle."""
    scalar = np.ndim(z) == 0
    out = PgfSampler(z).cri(u)
    return complex(out[0]) if scalar else out


def eval_decode_pgf(total_contenders: int, z) -> complex | np.ndarray:
    """PGF of the tagged user's decode slot; ``total_contenders`` includes it."""
    scalar = np.ndim(z) == 0
    out = PgfSampler(z).decode(total_contenders)
    return complex(out[0]) if scalar else out


@lru_cache(maxsize=16)
def _dft_sampler(n_points: int) -> PgfSampler:
    return PgfSampler.on_dft_grid(n_points)


def _idft(samples: np.ndarray) -> np.ndarray:
    """Aliased PMF on slots ``1..N`` (column ``k`` is slot ``k + 1``)."""
    a = np.fft.ifft(samples, axis=-1).real
    return np.roll(a, -1, axis=-1)


def _initial_points(cap: int) -> int:
    n = max(MIN_POINTS, 2 * cap)
    return 1 << (n - 1).bit_length()


def _resolve(rows_at, cap: int) -> np.ndarray:
    """Run the adaptive-N inverse DFT and fold into ``cap`` bins.

    ``rows_at(sampler)`` returns the stacked PGF rows on the sampler's grid.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    n = _initial_points(cap)
    while n <= MAX_POINTS:
        dense = _idft(rows_at(_dft_sampler(n)))
        head = dense[:, : n // 2]
        if np.all(head.sum(axis=1) > 1.0 - TAIL_TOL):
            break
        n *= 2
    else:
        raise PmfResolutionError(f"tail mass not resolved with {MAX_POINTS} DFT points")
    if np.any(head < -NEGATIVE_CLAMP):
        raise PmfResolutionError("inverse DFT produced materially negative mass")
    head = np.where(head < NOISE_FLOOR, 0.0, head)
    head /= head.sum(axis=1, keepdims=True)
    out = head[:, :cap].copy()
    out[:, cap - 1] = np.clip(1.0 - out[:, : cap - 1].sum(axis=1), 0.0, None)
    return out


@lru_cache(maxsize=256)
def cri_length_pmfs(u_max: int, cap: int) -> np.ndarray:
    """Matrix of CRI-length PMFs, row ``u`` for ``u = 0..u_max``, column ``k`` slot ``k+1``.

    Bins ``1..cap-1`` are exact; bin ``cap`` holds all mass at or beyond ``cap``.
    """
    out = _resolve(lambda s: np.stack([s.cri(u) for u in range(u_max + 1)]), cap)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=256)
def decode_slot_pmfs(m_max: int, cap: int) -> np.ndarray:
    """Matrix of decode-slot PMFs, row ``m`` = number of other contenders."""
    out = _resolve(lambda s: np.stack([s.decode(m + 1) for m in range(m_max + 1)]), cap)
    out.setflags(write=False)
    return out


def cri_length_pmf(u: int, cap: int) -> Pmf:
    """PMF of the plain CTM CRI length for ``u`` contenders, tail folded into ``cap``."""
    if u < 0:
        raise ValueError("contender count must be >= 0")
    return Pmf.from_dense(cri_length_pmfs(u, cap)[u])


def decode_slot_pmf(m: int, cap: int) -> Pmf:
    """PMF of the tagged user's decode slot with ``m`` other contenders."""
    if m < 0:
        raise ValueError("number of other contenders must be >= 0")
    return Pmf.from_dense(decode_slot_pmfs(m, cap)[m])


def unresolved_probs(m_max: int, l_max: int) -> np.ndarray:
    """``phi(m)`` for ``m = 0..m_max``: tagged user still undecoded after ``l_max`` slots."""
    if l_max < 1:
        raise ValueError("l_max must be >= 1")
    head = decode_slot_pmfs(m_max, l_max + 1)[:, :l_max]
    return np.clip(1.0 - head.sum(axis=1), 0.0, 1.0)


def unresolved_prob(m: int, l_max: int) -> float:
    return float(unresolved_probs(m, l_max)[m])
