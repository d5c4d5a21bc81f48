"""Slot-accurate Monte Carlo simulator of gated CTM and CTM-ET.

Each user owns two random streams (packet generation, coin flips) derived
from one master seed.  A stream is a counter-based SplitMix64 sequence, so a
user's draws depend only on ``(seed, user, draw index)`` and never on what
other users or the instrumentation do.

Time convention: slot ``t`` covers ``[t, t+1)``.  A packet generated in slot
``t`` carries timestamp ``t``; a delivery in slot ``t`` happens at ``t+1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numba
import numpy as np

from .markov import ProtocolConfig

__all__ = [
    "SimMetrics",
    "run_simulation",
    "run_replicas",
    "merge_metrics",
    "replay_cri",
    "replay_cri_batch",
    "default_warmup",
    "stream_keys",
]

NEVER = np.int64(1) << np.int64(62)
PLAIN_HIST_CAP = 1024

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_ONE = np.uint64(1)
_INV53 = 1.0 / 9007199254740992.0


@numba.njit(cache=True)
def _uniform(key, counter):
    """``(counter+1)``-th output of the SplitMix64 stream seeded with ``key``, in (0, 1]."""
    z = key + (np.uint64(counter) + _ONE) * _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    z = z ^ (z >> _S31)
    return (float(z >> _S11) + 1.0) * _INV53


@numba.njit(cache=True)
def _gap(key, counter, log_q):
    """Slots until the next generation: geometric on {1, 2, ...}."""
    if log_q == 0.0:
        return NEVER
    if log_q == -np.inf:
        return np.int64(1)
    u = _uniform(key, counter)
    return np.int64(1) + np.int64(math.floor(math.log(u) / log_q))


def stream_keys(seed: int, users: int) -> tuple[np.ndarray, np.ndarray]:
    """Independent 64-bit stream keys (generation, coin) per user."""
    state = np.random.SeedSequence(seed).generate_state(2 * users, dtype=np.uint64)
    return state[:users].copy(), state[users:].copy()


@numba.njit(cache=True)
def _simulate(users, rho, l_max, horizon, warmup, gen_keys, coin_keys, hist_cap, check):
    log_q = math.log1p(-rho) if rho < 1.0 else -np.inf

    gen_ctr = np.zeros(users, np.int64)
    coin_ctr = np.zeros(users, np.int64)
    next_gen = np.empty(users, np.int64)
    for j in range(users):
        next_gen[j] = _gap(gen_keys[j], gen_ctr[j], log_q) - 1
        gen_ctr[j] += 1
    buf_ts = np.full(users, -1, np.int64)

    # AoI bookkeeping
    last_del = np.full(users, -1.0)  # time of last delivery
    last_ts = np.zeros(users)  # timestamp of last delivered packet
    start = np.full(users, -1.0)  # integration start (first post-warmup delivery)
    area = np.zeros(users)
    y_n = np.zeros(users, np.int64)
    y_sum = np.zeros(users)
    y_sq = np.zeros(users)
    zy_sum = np.zeros(users)

    # whole-run counters: generated, entered, delivered, dropped, preempted
    counts = np.zeros(5, np.int64)
    # post-warmup: entered, delivered, dropped, cris / sum_d, sum_z, slots
    wcounts = np.zeros(4, np.int64)
    wsums = np.zeros(3)
    # violations: gated, global counter, local counter
    viol = np.zeros(3, np.int64)

    hist = np.zeros(hist_cap, np.int64)
    pairs = np.zeros((hist_cap, hist_cap), np.int64)
    gen_hist = np.zeros(hist_cap, np.int64)  # length of C0 per delivery
    del_hist = np.zeros(hist_cap, np.int64)  # length of C1 per delivery

    cont = np.empty(users, np.int64)
    cts = np.empty(users, np.int64)
    ctr = np.empty(users, np.int64)
    done = np.empty(users, np.bool_)

    t0 = np.int64(0)
    prev_len = np.int64(0)
    while t0 < horizon:
        # gated admission: only packets generated before this CRI starts
        k = 0
        for j in range(users):
            while next_gen[j] < t0:
                counts[0] += 1
                if buf_ts[j] >= 0:
                    counts[4] += 1
                buf_ts[j] = next_gen[j]
                next_gen[j] += _gap(gen_keys[j], gen_ctr[j], log_q)
                gen_ctr[j] += 1
            if buf_ts[j] >= 0:
                cont[k] = j
                cts[k] = buf_ts[j]
                ctr[k] = 0
                done[k] = False
                buf_ts[j] = -1
                if check and cts[k] >= t0:
                    viol[0] += 1
                k += 1
        counts[1] += k
        measured = t0 >= warmup
        if measured:
            wcounts[0] += k

        g = 1
        s = 0
        resolved = 0
        while True:
            s += 1
            ntx = 0
            who = -1
            for i in range(k):
                if not done[i]:
                    if check and ctr[i] > g - 1:
                        viol[2] += 1
                    if ctr[i] == 0:
                        ntx += 1
                        who = i
            if ntx <= 1:
                if ntx == 1:
                    done[who] = True
                    resolved += 1
                    j = cont[who]
                    tdel = float(t0 + s)
                    ts = float(cts[who])
                    if last_del[j] >= 0.0 and start[j] >= 0.0:
                        y = tdel - last_del[j]
                        zprev = last_del[j] - last_ts[j]
                        area[j] += y * zprev + 0.5 * y * y
                        y_n[j] += 1
                        y_sum[j] += y
                        y_sq[j] += y * y
                        zy_sum[j] += zprev * y
                    elif start[j] < 0.0 and measured:
                        start[j] = tdel
                    last_del[j] = tdel
                    last_ts[j] = ts
                    if measured:
                        wcounts[1] += 1
                        wsums[0] += s
                        wsums[1] += tdel - ts
                        gen_hist[min(max(prev_len, 1), hist_cap) - 1] += 1
                for i in range(k):
                    if not done[i]:
                        ctr[i] -= 1
                g -= 1
            else:
                for i in range(k):
                    if not done[i]:
                        if ctr[i] == 0:
                            if _uniform(coin_keys[cont[i]], coin_ctr[cont[i]]) > 0.5:
                                ctr[i] = 1
                            coin_ctr[cont[i]] += 1
                        else:
                            ctr[i] += 1
                g += 1
            if g == 0:
                if check and resolved != k:
                    viol[1] += 1
                break
            if l_max > 0 and s == l_max:
                break
        counts[2] += resolved
        counts[3] += k - resolved

        if measured:
            wcounts[2] += k - resolved
            wcounts[3] += 1
            b = min(s, hist_cap) - 1
            hist[b] += 1
            if prev_len > 0:
                pairs[min(prev_len, hist_cap) - 1, b] += 1
            if resolved > 0:
                del_hist[b] += resolved
        prev_len = s
        t0 += s

    t_end = t0
    # flush generations that happened before the end into the buffers
    for j in range(users):
        while next_gen[j] < t_end:
            counts[0] += 1
            if buf_ts[j] >= 0:
                counts[4] += 1
            buf_ts[j] = next_gen[j]
            next_gen[j] += _gap(gen_keys[j], gen_ctr[j], log_q)
            gen_ctr[j] += 1
    residual = 0
    for j in range(users):
        if buf_ts[j] >= 0:
            residual += 1

    # close the AoI integral at the end of the run
    user_delta = np.full(users, np.nan)
    for j in range(users):
        if start[j] >= 0.0 and t_end > start[j]:
            y = t_end - last_del[j]
            zprev = last_del[j] - last_ts[j]
            user_delta[j] = (area[j] + y * zprev + 0.5 * y * y) / (t_end - start[j])

    wsums[2] = float(t_end - max(warmup, 0))
    return (counts, residual, wcounts, wsums, viol, hist, pairs, gen_hist, del_hist,
            user_delta, y_n, y_sum, y_sq, zy_sum, t_end)


@dataclass
class SimMetrics:
    """Outcome of one simulation run (or a merge of several).

    Counts named ``generated`` .. ``residual`` cover the whole run and obey
    ``generated == delivered + dropped + preempted + residual``.  Every rate
    estimator uses only CRIs starting at or after the warmup.
    """

    cfg: ProtocolConfig
    horizon: int
    warmup: int
    seeds: tuple
    generated: int
    entered: int
    delivered: int
    dropped: int
    preempted: int
    residual: int
    measured_entered: int
    measured_delivered: int
    measured_dropped: int
    measured_cris: int
    sum_decode_slot: float
    sum_reset_age: float
    measured_slots: float
    cri_hist: np.ndarray = field(repr=False)
    cri_pairs: np.ndarray = field(repr=False)
    gen_cri_hist: np.ndarray = field(repr=False)
    deliver_cri_hist: np.ndarray = field(repr=False)
    user_delta: np.ndarray = field(repr=False)
    refresh_count: int = 0
    refresh_sum: float = 0.0
    refresh_sq: float = 0.0
    refresh_zy: float = 0.0
    violations: dict = field(default_factory=dict)
    replica_delta: np.ndarray = field(default=None, repr=False)
    replica_ps: np.ndarray = field(default=None, repr=False)
    replica_delay: np.ndarray = field(default=None, repr=False)

    @property
    def delivery_rate(self) -> float:
        """Delivered over entered contention; NaN when nothing entered."""
        if self.measured_entered == 0:
            return math.nan
        return self.measured_delivered / self.measured_entered

    @property
    def mean_delay(self) -> float:
        """Mean decode slot within the delivering CRI."""
        if self.measured_delivered == 0:
            return math.nan
        return self.sum_decode_slot / self.measured_delivered

    @property
    def mean_reset_age(self) -> float:
        if self.measured_delivered == 0:
            return math.nan
        return self.sum_reset_age / self.measured_delivered

    @property
    def delta(self) -> float:
        """Population-averaged time-average AoI (mean over users with data)."""
        vals = self.user_delta[np.isfinite(self.user_delta)]
        return float(vals.mean()) if vals.size else math.nan

    @property
    def cri_length_dist(self) -> np.ndarray:
        return self.cri_hist / max(self.cri_hist.sum(), 1)

    @property
    def mean_cri_length(self) -> float:
        n = self.cri_hist.sum()
        return float(np.arange(1, self.cri_hist.size + 1) @ self.cri_hist / n) if n else math.nan

    @property
    def mean_y(self) -> float:
        return self.refresh_sum / self.refresh_count if self.refresh_count else math.nan

    @property
    def mean_y2(self) -> float:
        return self.refresh_sq / self.refresh_count if self.refresh_count else math.nan

    @property
    def mean_zy(self) -> float:
        return self.refresh_zy / self.refresh_count if self.refresh_count else math.nan

    @property
    def seed_count(self) -> int:
        return len(self.seeds)

    def stderr(self, name: str) -> float:
        """Standard error across replicas of ``delta``, ``ps`` or ``delay``."""
        vals = {"delta": self.replica_delta, "ps": self.replica_ps, "delay": self.replica_delay}[name]
        vals = vals[np.isfinite(vals)] if vals is not None else np.array([])
        if vals.size < 2:
            return math.nan
        return float(vals.std(ddof=1) / math.sqrt(vals.size))

    @property
    def total_violations(self) -> int:
        return int(sum(self.violations.values()))

    def as_record(self) -> dict:
        """Flat record of scalar fields, for serialization."""
        rec = {
            "U": self.cfg.users,
            "rho": self.cfg.rho,
            "lmax": self.cfg.l_max,
            "horizon": self.horizon,
            "warmup": self.warmup,
            "seed_count": self.seed_count,
            "delta": self.delta,
            "ps": self.delivery_rate,
            "mean_delay": self.mean_delay,
            "mean_reset_age": self.mean_reset_age,
            "mean_Y": self.mean_y,
            "mean_Y2": self.mean_y2,
            "mean_ZY": self.mean_zy,
            "mean_cri_length": self.mean_cri_length,
        }
        for f in fields(self):
            if f.name in ("generated", "entered", "delivered", "dropped", "preempted", "residual"):
                rec[f.name] = getattr(self, f.name)
        rec.update({f"violations_{k}": v for k, v in self.violations.items()})
        return rec


def default_warmup(horizon: int) -> int:
    return min(max(horizon // 10, 10_000), horizon - 1) if horizon > 1 else 0


def run_simulation(
    cfg: ProtocolConfig,
    horizon: int,
    warmup: int | None = None,
    seed: int = 0,
    check: bool = True,
    hist_cap: int | None = None,
) -> SimMetrics:
    """Simulate ``horizon`` slots of the protocol and collect metrics."""
    if warmup is None:
        warmup = default_warmup(horizon)
    if not horizon > warmup >= 0:
        raise ValueError("need horizon > warmup >= 0")
    if hist_cap is None:
        hist_cap = cfg.l_max if cfg.l_max is not None else PLAIN_HIST_CAP
    gen_keys, coin_keys = stream_keys(seed, cfg.users)
    l_max = 0 if cfg.l_max is None else cfg.l_max
    (counts, residual, wc, ws, viol, hist, pairs, gen_hist, del_hist,
     user_delta, y_n, y_sum, y_sq, zy_sum, _) = _simulate(
        cfg.users, cfg.rho, l_max, int(horizon), int(warmup),
        gen_keys, coin_keys, int(hist_cap), bool(check))
    m = SimMetrics(
        cfg=cfg,
        horizon=int(horizon),
        warmup=int(warmup),
        seeds=(seed,),
        generated=int(counts[0]),
        entered=int(counts[1]),
        delivered=int(counts[2]),
        dropped=int(counts[3]),
        preempted=int(counts[4]),
        residual=int(residual),
        measured_entered=int(wc[0]),
        measured_delivered=int(wc[1]),
        measured_dropped=int(wc[2]),
        measured_cris=int(wc[3]),
        sum_decode_slot=float(ws[0]),
        sum_reset_age=float(ws[1]),
        measured_slots=float(ws[2]),
        cri_hist=hist,
        cri_pairs=pairs,
        gen_cri_hist=gen_hist,
        deliver_cri_hist=del_hist,
        user_delta=user_delta,
        refresh_count=int(y_n.sum()),
        refresh_sum=float(y_sum.sum()),
        refresh_sq=float(y_sq.sum()),
        refresh_zy=float(zy_sum.sum()),
        violations={"gated": int(viol[0]), "global_counter": int(viol[1]), "local_counter": int(viol[2])},
    )
    m.replica_delta = np.array([m.delta])
    m.replica_ps = np.array([m.delivery_rate])
    m.replica_delay = np.array([m.mean_delay])
    return m


_SUMMED = (
    "generated", "entered", "delivered", "dropped", "preempted", "residual",
    "measured_entered", "measured_delivered", "measured_dropped", "measured_cris",
    "sum_decode_slot", "sum_reset_age", "measured_slots",
    "cri_hist", "cri_pairs", "gen_cri_hist", "deliver_cri_hist",
    "refresh_count", "refresh_sum", "refresh_sq", "refresh_zy",
)


def merge_metrics(runs: list[SimMetrics]) -> SimMetrics:
    """Sum replicas of the same configuration into one record."""
    if not runs:
        raise ValueError("nothing to merge")
    first = runs[0]
    kw = {name: sum(getattr(r, name) for r in runs) for name in _SUMMED}
    merged = SimMetrics(
        cfg=first.cfg,
        horizon=first.horizon,
        warmup=first.warmup,
        seeds=tuple(s for r in runs for s in r.seeds),
        user_delta=np.concatenate([r.user_delta for r in runs]),
        violations={k: sum(r.violations[k] for r in runs) for k in first.violations},
        **kw,
    )
    merged.replica_delta = np.concatenate([r.replica_delta for r in runs])
    merged.replica_ps = np.concatenate([r.replica_ps for r in runs])
    merged.replica_delay = np.concatenate([r.replica_delay for r in runs])
    return merged


def run_replicas(cfg: ProtocolConfig, horizon: int, seeds, warmup: int | None = None, **kw) -> SimMetrics:
    return merge_metrics([run_simulation(cfg, horizon, warmup, seed=s, **kw) for s in seeds])


@numba.njit(cache=True)
def _replay(contenders, l_max, n, key):
    lengths = np.empty(n, np.int64)
    decoded = np.zeros(n, np.int64)
    ctr = np.zeros(max(contenders, 1), np.int64)
    done = np.zeros(max(contenders, 1), np.bool_)
    draw = np.int64(0)
    for r in range(n):
        for i in range(contenders):
            ctr[i] = 0
            done[i] = False
        g = 1
        s = 0
        while True:
            s += 1
            ntx = 0
            who = -1
            for i in range(contenders):
                if not done[i] and ctr[i] == 0:
                    ntx += 1
                    who = i
            if ntx <= 1:
                if ntx == 1:
                    done[who] = True
                    if who == 0:
                        decoded[r] = s
                for i in range(contenders):
                    if not done[i]:
                        ctr[i] -= 1
                g -= 1
            else:
                for i in range(contenders):
                    if not done[i]:
                        if ctr[i] == 0:
                            if _uniform(key, draw) > 0.5:
                                ctr[i] = 1
                            draw += 1
                        else:
                            ctr[i] += 1
                g += 1
            if g == 0 or (l_max > 0 and s == l_max):
                break
        lengths[r] = s
    return lengths, decoded


def replay_cri_batch(contenders: int, l_max: int | None, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``n`` isolated CRIs; user 0 is tagged (decode slot 0 = not decoded)."""
    if contenders < 0:
        raise ValueError("contenders must be >= 0")
    key = np.random.SeedSequence(seed).generate_state(1, dtype=np.uint64)[0]
    return _replay(int(contenders), 0 if l_max is None else int(l_max), int(n), key)


def replay_cri(contenders: int, l_max: int | None = None, seed: int = 0) -> tuple[int, int | None]:
    """One isolated CRI: ``(length, decode slot of the tagged user or None)``."""
    lengths, decoded = replay_cri_batch(contenders, l_max, 1, seed)
    d = int(decoded[0])
    return int(lengths[0]), (d if d > 0 else None)
