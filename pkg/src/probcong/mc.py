"""Monte-Carlo backend.

Particles are joint realisations of every flight's overfly times. A particle
id names the same realisation in every sector, so sectors sharing a flight
see common random numbers. Trajectories are generated in fixed-size blocks
whose random stream is keyed on ``(seed, flight, block)`` only, which keeps
results independent of evaluation order and thread count.
"""
from __future__ import annotations

import math
import threading
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit

from .dist import BoundedDistribution, PertDist, PiecewiseLinearDist, TriangularDist
from .flightmodel import Crossing, FlightPlan, IntentModel, SampledTrajectory, check_feasible
from .scenario import DecisionVector, Scenario

BLOCK_SIZE = 1024
DEFAULT_N_INIT = 30
DEFAULT_N_MAX = 10**7


# ---------------------------------------------------------------------------
# accumulators and stopping


class MeanAccumulator:
    """Online mean and squared-deviation sum (Welford), mergeable."""

    __slots__ = ("n", "mean", "m2")

    def __init__(self, n: int = 0, mean: float = 0.0, m2: float = 0.0):
        self.n = int(n)
        self.mean = float(mean)
        self.m2 = float(m2)

    def add(self, x: float) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def add_many(self, xs) -> None:
        xs = np.asarray(xs, dtype=float).ravel()
        if xs.size:
            mu = float(xs.mean())
            self.merge(MeanAccumulator(xs.size, mu, float(np.sum((xs - mu) ** 2))))

    def merge(self, other: "MeanAccumulator") -> "MeanAccumulator":
        if other.n == 0:
            return self
        if self.n == 0:
            self.n, self.mean, self.m2 = other.n, other.mean, other.m2
            return self
        n = self.n + other.n
        delta = other.mean - self.mean
        self.mean += delta * other.n / n
        self.m2 += other.m2 + delta * delta * self.n * other.n / n
        self.n = n
        return self

    def copy(self) -> "MeanAccumulator":
        return MeanAccumulator(self.n, self.mean, self.m2)

    @property
    def var(self) -> float:
        return self.m2 / (self.n - 1) if self.n >= 2 else math.nan

    @property
    def sem(self) -> float:
        return math.sqrt(max(self.var, 0.0) / self.n) if self.n >= 2 else math.nan

    def __repr__(self):
        return f"MeanAccumulator(n={self.n}, mean={self.mean!r}, sem={self.sem!r})"


@dataclass(frozen=True)
class StoppingRule:
    """Stop once ``SEM <= eps_rel * mean`` or ``mean + 3 SEM <= eps_abs``.

    With ``literal=True`` the loop instead runs while
    ``eps_rel * mean < SEM < eps_abs``.
    """

    eps_rel: float = 0.01
    eps_abs: float = 0.1
    n_init: int = DEFAULT_N_INIT
    n_max: int = DEFAULT_N_MAX
    literal: bool = False

    def __post_init__(self):
        if not (self.eps_rel > 0 and self.eps_abs > 0):
            raise ValueError("eps_rel and eps_abs must be positive")
        if self.n_init < 2:
            raise ValueError("n_init must be >= 2")
        if self.n_max < self.n_init:
            raise ValueError("n_max must be >= n_init")

    def reason(self, mean, sem):
        """Vectorised stop reason: 0 continue, 1 relative, 2 absolute."""
        mean = np.asarray(mean, dtype=float)
        sem = np.asarray(sem, dtype=float)
        if self.literal:
            rel = sem <= self.eps_rel * mean
            ab = sem >= self.eps_abs
        else:
            ab = mean + 3.0 * sem <= self.eps_abs
            rel = sem <= self.eps_rel * mean
        return np.where(ab & ~(self.literal & rel), 2, np.where(rel, 1, 0))


@dataclass(frozen=True)
class MCResult:
    mean: float
    sem: float
    n_used: int
    converged: bool
    stop: str  # "rel", "abs" or "max"
    trace: tuple[tuple[int, float, float], ...] = ()


def _prefix_stats(acc: MeanAccumulator, xs: np.ndarray):
    """Count, mean, m2 after each element of ``xs`` is appended to ``acc``."""
    c = acc.mean if acc.n else float(xs[0])
    d = xs - c
    s1 = np.cumsum(d)
    n = acc.n + np.arange(1, xs.size + 1)
    # old points sit around c with squared deviations summing to acc.m2
    shift = (acc.n * (acc.mean - c) + s1) / n
    m2 = acc.m2 + acc.n * (acc.mean - c) ** 2 + np.cumsum(d * d) - n * shift * shift
    return n, c + shift, np.maximum(m2, 0.0)


def run_until_stopped(draw: Callable[[int, int], np.ndarray], rule: StoppingRule,
                      checkpoints: Iterable[int] = ()) -> MCResult:
    """Drive ``draw(start, count)`` until ``rule`` fires or ``n_max`` samples are used.

    The rule is checked after every single sample from ``n_init`` on, so the
    returned count does not depend on the internal batch size. ``checkpoints``
    lists sample counts at which ``(n, mean, sem)`` is recorded.
    """
    acc = MeanAccumulator()
    marks = sorted({int(c) for c in checkpoints if c >= 1})
    trace = []
    batch = rule.n_init
    while acc.n < rule.n_max:
        count = min(batch, rule.n_max - acc.n)
        xs = np.asarray(draw(acc.n, count), dtype=float)
        n, mean, m2 = _prefix_stats(acc, xs)
        with np.errstate(invalid="ignore", divide="ignore"):
            sem = np.sqrt(m2 / np.maximum(n - 1, 1) / n)
        reason = np.where(n >= rule.n_init, rule.reason(mean, sem), 0)
        hit = np.flatnonzero(reason)
        stop_at = int(hit[0]) if hit.size else xs.size - 1
        for m in marks:
            if n[0] <= m <= n[stop_at]:
                k = m - int(n[0])
                trace.append((m, float(mean[k]), float(sem[k]) if m >= 2 else math.nan))
        acc = MeanAccumulator(int(n[stop_at]), float(mean[stop_at]), float(m2[stop_at]))
        if hit.size:
            stop = "rel" if reason[stop_at] == 1 else "abs"
            return MCResult(acc.mean, acc.sem, acc.n, True, stop, tuple(trace))
        batch = int(min(max(acc.n, 256), 1 << 18))
    return MCResult(acc.mean, acc.sem, acc.n, False, "max", tuple(trace))


# ---------------------------------------------------------------------------
# trajectory sampling

_INB_POINT, _INB_TRI, _INB_PERT, _INB_PWL = 0, 1, 2, 3


@njit(cache=True)
def _tri_ppf(u, a, m, b):
    w = b - a
    if w <= 0.0:
        return a
    if u * w < m - a:
        return a + math.sqrt(u * w * (m - a))
    return b - math.sqrt((1.0 - u) * w * (b - m))


@njit(cache=True)
def _sample_block(rng, n, inb_kind, inb, xs, ys, cum, targets, durations, family, half, lam, out):
    """Fill ``out[:n]`` with trajectories; ``family`` 0 triangular, 1 PERT."""
    npts = targets.size
    for p in range(n):
        if inb_kind == _INB_POINT:
            delay = inb[0]
        elif inb_kind == _INB_TRI:
            delay = _tri_ppf(rng.random(), inb[0], inb[1], inb[2])
        elif inb_kind == _INB_PERT:
            w = inb[2] - inb[0]
            al = 1.0 + inb[3] * (inb[1] - inb[0]) / w
            be = 1.0 + inb[3] * (inb[2] - inb[1]) / w
            delay = inb[0] + rng.beta(al, be) * w
        else:
            u = rng.random() * cum[cum.size - 1]
            k = np.searchsorted(cum, u, side="right") - 1
            k = min(max(k, 0), xs.size - 2)
            rest = u - cum[k]
            slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
            disc = max(ys[k] * ys[k] + 2.0 * slope * rest, 0.0)
            den = ys[k] + math.sqrt(disc)
            step = 2.0 * rest / den if den > 0.0 else 0.0
            delay = min(max(xs[k] + step, xs[k]), xs[k + 1])
        t = targets[0] + delay
        out[p, 0] = t
        for i in range(npts - 1):
            d = durations[i]
            if half <= 0.0:
                t = t + d
            else:
                a = t + d - half
                b = t + d + half
                m = min(max(targets[i + 1], a), b)
                if family == 0:
                    t = _tri_ppf(rng.random(), a, m, b)
                else:
                    w = b - a
                    t = a + rng.beta(1.0 + lam * (m - a) / w, 1.0 + lam * (b - m) / w) * w
            out[p, i + 1] = t


def _inbound_args(law: BoundedDistribution):
    empty = np.zeros(2)
    if law.degenerate:
        return _INB_POINT, np.array([law.lo, 0.0, 0.0, 0.0]), empty, empty, empty
    if isinstance(law, TriangularDist):
        return _INB_TRI, np.array([law.min, law.mode, law.max, 0.0]), empty, empty, empty
    if isinstance(law, PertDist):
        return _INB_PERT, np.array([law.min, law.mode, law.max, law.lam]), empty, empty, empty
    if isinstance(law, PiecewiseLinearDist):
        return _INB_PWL, np.zeros(4), law._x, law._y, law._cum
    raise TypeError(f"unsupported inbound law {type(law).__name__}")


class TrajectorySampler:
    """Compiled forward sampler for one flight under fixed targets."""

    def __init__(self, flight: FlightPlan, targets: Sequence[float], intent: IntentModel):
        self.flight = flight
        self.targets = np.ascontiguousarray(targets, dtype=float)
        check_feasible(flight, self.targets, intent)
        self._inb = _inbound_args(flight.inbound)
        self._dur = np.asarray(flight.durations, dtype=float)
        self._family = 0 if intent.family == "triangular" else 1
        self._half = 0.0 if intent.deterministic else intent.half
        self._lam = float(intent.lam)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        out = np.empty((n, self.flight.n_points))
        kind, inb, xs, ys, cum = self._inb
        _sample_block(rng, n, kind, inb, xs, ys, cum, self.targets, self._dur,
                      self._family, self._half, self._lam, out)
        return out


def flight_key(flight_id: str) -> int:
    return zlib.crc32(flight_id.encode("utf-8"))


class ParticleStore:
    """Memoised trajectories keyed by ``(particle, flight)``.

    Block ``b`` of flight ``f`` holds particles ``b*block_size`` up to the next
    block and is drawn from a stream seeded by ``(seed, crc32(f), b)``.
    Blocks live in a bounded LRU cache; evicted blocks are regenerated
    bit-identically.
    """

    def __init__(self, scenario: Scenario, gamma: DecisionVector | None, seed: int,
                 block_size: int = BLOCK_SIZE, max_blocks: int = 8192):
        gamma = scenario.nominal_decision() if gamma is None else gamma
        self.scenario = scenario
        self.seed = int(seed)
        self.block_size = int(block_size)
        self.max_blocks = int(max_blocks)
        self._samplers = {f.id: TrajectorySampler(f, gamma[f.id], scenario.intent)
                          for f in scenario.flights}
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def block(self, flight_id: str, b: int) -> np.ndarray:
        key = (flight_id, b)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self._cache.move_to_end(key)
                return hit
        ss = np.random.SeedSequence(self.seed, spawn_key=(flight_key(flight_id), int(b)))
        arr = self._samplers[flight_id].sample(np.random.Generator(np.random.PCG64(ss)), self.block_size)
        arr.setflags(write=False)
        with self._lock:
            # first writer wins; the values are identical anyway
            arr = self._cache.setdefault(key, arr)
            self._cache.move_to_end(key)
            while len(self._cache) > self.max_blocks:
                self._cache.popitem(last=False)
        return arr

    def trajectories(self, flight_id: str, start: int, stop: int) -> np.ndarray:
        """Overfly times of particles ``start <= p < stop``, shape ``(stop-start, n_points)``."""
        bs = self.block_size
        parts = []
        for b in range(start // bs, (stop - 1) // bs + 1):
            lo = max(start - b * bs, 0)
            hi = min(stop - b * bs, bs)
            parts.append(self.block(flight_id, b)[lo:hi])
        return np.concatenate(parts) if len(parts) > 1 else parts[0]

    def trajectory(self, particle: int, flight_id: str) -> SampledTrajectory:
        return SampledTrajectory(self.trajectories(flight_id, particle, particle + 1)[0].copy())

    def sector_intervals(self, flights: Sequence[tuple[str, Crossing]], start: int, stop: int):
        """Entry and exit times, each of shape ``(stop-start, len(flights))``."""
        n = stop - start
        entry = np.empty((n, len(flights)))
        exit_ = np.empty((n, len(flights)))
        for j, (fid, c) in enumerate(flights):
            tr = self.trajectories(fid, start, stop)
            entry[:, j] = tr[:, c.entry_idx]
            exit_[:, j] = tr[:, c.exit_idx]
        return entry, exit_


# ---------------------------------------------------------------------------
# sweep line


def excess_weight(count, capacity: int):
    count = np.asarray(count)
    return np.where(count > capacity, (count - capacity) ** 2, 0)


@dataclass(frozen=True)
class EventList:
    """Entry (+1) and exit (-1) events, ascending, exits first on ties."""

    times: np.ndarray
    deltas: np.ndarray

    @classmethod
    def from_intervals(cls, intervals: Iterable[tuple[float, float]]) -> "EventList":
        ev = []
        for lo, hi in intervals:
            if hi < lo:
                raise ValueError(f"interval [{lo}, {hi}] is reversed")
            if hi > lo:
                ev.append((float(lo), 1))
                ev.append((float(hi), -1))
        ev.sort()
        times = np.array([t for t, _ in ev], dtype=float)
        deltas = np.array([d for _, d in ev], dtype=np.int64)
        return cls(times, deltas)

    def counts(self) -> np.ndarray:
        """Occupancy right after each event."""
        return np.cumsum(self.deltas)

    def segments(self) -> list[tuple[float, float, int]]:
        """Maximal pieces ``(start, end, count)`` of positive length and constant count."""
        c = self.counts()
        out = []
        for j in range(len(self.times) - 1):
            if self.times[j + 1] > self.times[j]:
                out.append((float(self.times[j]), float(self.times[j + 1]), int(c[j])))
        return out


def sweep_cost(intervals: Iterable[tuple[float, float]], capacity: int) -> float:
    """Sum over constant-count pieces of ``(count - C)^2 * length`` where count > C."""
    total = 0.0
    for lo, hi, k in EventList.from_intervals(intervals).segments():
        if k > capacity:
            total += (k - capacity) ** 2 * (hi - lo)
    return total


def _sorted_events(entry: np.ndarray, exit_: np.ndarray):
    m, f = entry.shape
    times = np.concatenate([exit_, entry], axis=1)
    order = np.argsort(times, axis=1, kind="stable")
    deltas = np.concatenate([-np.ones(f, dtype=np.int64), np.ones(f, dtype=np.int64)])
    t_sorted = np.take_along_axis(times, order, axis=1)
    counts = np.cumsum(deltas[order], axis=1)
    return t_sorted, counts


def sweep_costs(entry: np.ndarray, exit_: np.ndarray, capacity: int) -> np.ndarray:
    """Vectorised :func:`sweep_cost`: one particle per row."""
    if entry.shape[1] <= capacity:
        return np.zeros(entry.shape[0])
    t, counts = _sorted_events(entry, exit_)
    seg = np.diff(t, axis=1)
    return np.sum(excess_weight(counts[:, :-1], capacity) * seg, axis=1)


def congested_intervals(entry: np.ndarray, exit_: np.ndarray, capacity: int):
    """Maximal over-capacity intervals per particle.

    Returns ``(row, start, end)`` arrays, ordered by row then time.
    """
    m = entry.shape[0]
    if entry.shape[1] <= capacity:
        e = np.zeros(0)
        return np.zeros(0, dtype=np.int64), e, e
    t, counts = _sorted_events(entry, exit_)
    cong = counts[:, :-1] > capacity
    pad = np.zeros((m, 1), dtype=bool)
    prev = np.concatenate([pad, cong[:, :-1]], axis=1)
    nxt = np.concatenate([cong[:, 1:], pad], axis=1)
    rs, js = np.nonzero(cong & ~prev)
    re, je = np.nonzero(cong & ~nxt)
    return rs, t[rs, js], t[re, je + 1]


def _sector_flights(scenario: Scenario, sector: str) -> list[tuple[str, Crossing]]:
    return [(f.id, f.crossing_for(sector)) for f in scenario.sector_flights(sector)]


def _clip(entry, exit_, horizon):
    if horizon is None:
        return entry, exit_
    h0, h1 = horizon
    return np.clip(entry, h0, h1), np.clip(exit_, h0, h1)


def congestion_cost_sampling(sector: str, particle: int, flights: Sequence[tuple[str, Crossing]],
                             capacity: int, store: ParticleStore,
                             horizon: tuple[float, float] | None = None) -> float:
    """Congestion cost of one particle in one sector, by an explicit sweep."""
    intervals = []
    for fid, c in flights:
        times = store.trajectory(particle, fid).times
        lo, hi = times[c.entry_idx], times[c.exit_idx]
        if horizon is not None:
            lo, hi = min(max(lo, horizon[0]), horizon[1]), min(max(hi, horizon[0]), horizon[1])
        intervals.append((lo, hi))
    return sweep_cost(intervals, capacity)


def expected_congestion_cost_mc(sector: str, flights: Sequence[tuple[str, Crossing]], capacity: int,
                                rule: StoppingRule, store: ParticleStore,
                                horizon: tuple[float, float] | None = None,
                                checkpoints: Iterable[int] = ()) -> MCResult:
    """Mean per-particle congestion cost of ``sector`` with SEM-based stopping."""

    def draw(start, count):
        entry, exit_ = store.sector_intervals(flights, start, start + count)
        return sweep_costs(*_clip(entry, exit_, horizon), capacity)

    return run_until_stopped(draw, rule, checkpoints)


def expected_delay_cost_mc(flight: FlightPlan, targets: Sequence[float], scheduled_arrival: float,
                           rule: StoppingRule, rng: np.random.Generator, intent: IntentModel,
                           checkpoints: Iterable[int] = ()) -> MCResult:
    """Mean of ``(t_last - A)_+^2`` over forward-sampled trajectories."""
    sampler = TrajectorySampler(flight, targets, intent)
    a = float(scheduled_arrival)

    def draw(start, count):
        late = np.maximum(sampler.sample(rng, count)[:, -1] - a, 0.0)
        return late * late

    return run_until_stopped(draw, rule, checkpoints)


# ---------------------------------------------------------------------------
# congestion monitoring


@dataclass
class MonitorMap:
    """Ordered timestamps with Bernoulli congestion estimates.

    ``hits[k]`` of ``counts[k]`` processed particles were congested at
    ``keys[k]``; ``probes`` are keys requested up front.
    """

    merge_eps: float
    keys: np.ndarray = field(default_factory=lambda: np.zeros(0))
    hits: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    counts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_particles: int = 0
    converged: bool = True

    def __len__(self):
        return self.keys.size

    @property
    def probability(self) -> np.ndarray:
        return self.hits / np.maximum(self.counts, 1)

    @property
    def sem(self) -> np.ndarray:
        n = self.counts.astype(float)
        p = self.probability
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.sqrt(p * (1.0 - p) / (n - 1.0))
        return np.where(n >= 2, out, np.nan)

    def accumulator(self, k: int) -> MeanAccumulator:
        n, h = int(self.counts[k]), int(self.hits[k])
        return MeanAccumulator(n, h / n if n else 0.0, h * (1.0 - h / n) if n else 0.0)

    def items(self):
        return [(float(t), self.accumulator(k)) for k, t in enumerate(self.keys)]

    def max_sem(self) -> float:
        return float(np.max(self.sem, initial=0.0))

    def at(self, t: float) -> tuple[float, float]:
        """Estimate and SEM at the key nearest to ``t``."""
        k = int(np.argmin(np.abs(self.keys - t)))
        return float(self.probability[k]), float(self.sem[k])


def _inside(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Membership of ``x`` in a union of disjoint closed intervals sorted by start."""
    if lo.size == 0:
        return np.zeros(np.shape(x), dtype=bool)
    k = np.searchsorted(lo, x, side="right") - 1
    return (k >= 0) & (x <= hi[np.maximum(k, 0)])


class _Monitor:
    def __init__(self, merge_eps: float, probes: Sequence[float]):
        self.map = MonitorMap(merge_eps)
        self.hist_lo: list[np.ndarray] = []
        self.hist_hi: list[np.ndarray] = []
        self._flat = (np.zeros(0), np.zeros(0))
        self._flat_len = 0
        for t in probes:
            self._insert(float(t))

    def _history(self):
        if self._flat_len != len(self.hist_lo):
            self._flat = (np.concatenate([np.zeros(0)] + self.hist_lo),
                          np.concatenate([np.zeros(0)] + self.hist_hi))
            self._flat_len = len(self.hist_lo)
        return self._flat

    def _insert(self, x: float) -> None:
        m = self.map
        k = int(np.searchsorted(m.keys, x))
        for j in (k - 1, k):
            if 0 <= j < m.keys.size and abs(m.keys[j] - x) < m.merge_eps:
                return
        lo, hi = self._history()
        # intervals of one particle are disjoint, so this counts particles
        backfill = int(np.count_nonzero((lo <= x) & (x <= hi)))
        m.keys = np.insert(m.keys, k, x)
        m.hits = np.insert(m.hits, k, backfill)
        m.counts = np.insert(m.counts, k, m.n_particles)

    def update(self, lo: np.ndarray, hi: np.ndarray) -> None:
        for x in np.concatenate([lo, hi]):
            self._insert(float(x))
        m = self.map
        m.hits += _inside(m.keys, lo, hi)
        m.counts += 1
        m.n_particles += 1
        if lo.size:
            self.hist_lo.append(lo)
            self.hist_hi.append(hi)


def congestion_monitoring(sector: str, flights: Sequence[tuple[str, Crossing]], capacity: int,
                          merge_eps: float, eps_rel: float, store: ParticleStore,
                          n_init: int = DEFAULT_N_INIT, n_max: int = DEFAULT_N_MAX,
                          horizon: tuple[float, float] | None = None,
                          probes: Sequence[float] = ()) -> MonitorMap:
    """Adaptive map of the congestion probability of ``sector`` over time.

    Each particle contributes its maximal over-capacity intervals; their
    endpoints become keys unless an existing key lies within ``merge_eps``.
    Every key receives one 0/1 update per particle, and new keys are
    backfilled against all earlier particles. Stops once the largest key SEM
    is at most ``eps_rel`` (after ``n_init`` particles).
    """
    if not merge_eps > 0:
        raise ValueError("merge radius must be positive")
    mon = _Monitor(merge_eps, probes)
    m = mon.map
    chunk = max(n_init, 64)
    while m.n_particles < n_max:
        start = m.n_particles
        count = min(chunk, n_max - start)
        entry, exit_ = _clip(*store.sector_intervals(flights, start, start + count), horizon)
        rows, lo, hi = congested_intervals(entry, exit_, capacity)
        bounds = np.searchsorted(rows, np.arange(count + 1))
        for r in range(count):
            a, b = bounds[r], bounds[r + 1]
            mon.update(lo[a:b], hi[a:b])
            if m.n_particles >= n_init and m.max_sem() <= eps_rel:
                m.converged = True
                return m
        chunk = min(2 * chunk, 4096)
    m.converged = m.max_sem() <= eps_rel
    return m


def sector_flights(scenario: Scenario, sector: str) -> list[tuple[str, Crossing]]:
    return _sector_flights(scenario, sector)
