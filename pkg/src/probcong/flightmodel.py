"""Flight plans, the Markov chain of overfly times, and presence probabilities.

A flight is a chain of boundary points. The time at the first point is the
takeoff target plus an inbound delay; each subsequent time is drawn from an
intent model conditioned on the previous time. Marginals along the chain are
cached on a uniform time grid (:class:`MarginalCurve`) so that each step of
the chain is a one-dimensional integral per grid node.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit, vectorize

from .dist import (
    DEFAULT_LAMBDA,
    BoundedDistribution,
    PertDist,
    TriangularDist,
    pert_pdf,
    pert_shapes,
    triangular_pdf,
    triangular_ppf,
)
from .quad import (
    DEFAULT_SPEC,
    CELL_ORDERS,
    QuadratureError,
    QuadratureSpec,
    _nested_pair,
    integrate_cells,
)

FEASIBILITY_TOL = 1e-6
# propagation cells narrower than this fraction of the grid step are skipped
SLIVER = 1e-9


@vectorize(["float64(float64, float64, float64, float64, float64)"], cache=True)
def _triangular_next_pdf(t, t_prev, lo_off, hi_off, target):
    a = t_prev + lo_off
    b = t_prev + hi_off
    m = min(max(target, a), b)
    return triangular_pdf(t, a, m, b)


@vectorize(["float64(float64, float64, float64, float64, float64, float64)"], cache=True)
def _pert_next_pdf(t, t_prev, lo_off, hi_off, target, lam):
    a = t_prev + lo_off
    b = t_prev + hi_off
    m = min(max(target, a), b)
    return pert_pdf(t, a, m, b, lam)


@njit(cache=True)
def _curve_at(tau, start, step, values):
    u = (tau - start) / step
    k = int(math.floor(u))
    if k < 0:
        return values[0] if u > -1e-12 else 0.0
    if k >= values.size - 1:
        return values[values.size - 1] if k == values.size - 1 and u - k < 1e-12 else 0.0
    r = u - k
    return values[k] * (1.0 - r) + values[k + 1] * r


@njit(cache=True)
def _piece(t, lo, hi, x_ref, w_hi, w_lo, start, step, values, lo_off, hi_off, target, family, lam):
    span = hi - lo
    s_hi = 0.0
    s_lo = 0.0
    for j in range(x_ref.size):
        tau = lo + span * x_ref[j]
        if family == 0:
            g = _triangular_next_pdf(t, tau, lo_off, hi_off, target)
        else:
            g = _pert_next_pdf(t, tau, lo_off, hi_off, target, lam)
        fx = g * _curve_at(tau, start, step, values)
        s_hi += w_hi[j] * fx
        s_lo += w_lo[j] * fx
    return 0.5 * span * s_hi, abs(0.5 * span * (s_hi - s_lo))


@njit(cache=True)
def _propagate_nodes(t_out, lo_tau, hi_tau, kinks, start, step, values, lo_off, hi_off, target,
                     family, lam, x_ref, w_hi, w_lo, rel_tol, max_sub, out):
    """Per output node, sum of adaptive integrals over the cells between kinks.

    Each cell bisects its worst piece until the summed error estimate meets
    ``max(1e-12 * width, rel_tol * |value|)``. Returns the number of cells
    that ran out of subdivisions.
    """
    p_lo = np.empty(max_sub)
    p_hi = np.empty(max_sub)
    p_val = np.empty(max_sub)
    p_err = np.empty(max_sub)
    failures = 0
    # cells this thin come from kinks an ulp away from a limit and carry no mass
    sliver = SLIVER * step
    for i in range(t_out.size):
        a = lo_tau[i]
        b = hi_tau[i]
        acc = 0.0
        if b > a:
            j = np.searchsorted(kinks, a, side="right")
            left = a
            while left < b:
                right = kinks[j] if j < kinks.size and kinks[j] < b else b
                j += 1
                if right - left <= sliver:
                    left = max(left, right)
                    continue
                p_lo[0] = left
                p_hi[0] = right
                p_val[0], p_err[0] = _piece(t_out[i], left, right, x_ref, w_hi, w_lo, start, step,
                                            values, lo_off, hi_off, target, family, lam)
                n = 1
                while True:
                    total = 0.0
                    terr = 0.0
                    worst = 0
                    for k in range(n):
                        total += p_val[k]
                        terr += p_err[k]
                        if p_err[k] > p_err[worst]:
                            worst = k
                    if terr <= max(1e-12 * (right - left), rel_tol * abs(total)):
                        break
                    if n >= max_sub:
                        failures += 1
                        break
                    mid = 0.5 * (p_lo[worst] + p_hi[worst])
                    p_lo[n] = mid
                    p_hi[n] = p_hi[worst]
                    p_hi[worst] = mid
                    p_val[worst], p_err[worst] = _piece(t_out[i], p_lo[worst], mid, x_ref, w_hi, w_lo,
                                                        start, step, values, lo_off, hi_off, target,
                                                        family, lam)
                    p_val[n], p_err[n] = _piece(t_out[i], mid, p_hi[n], x_ref, w_hi, w_lo, start,
                                                step, values, lo_off, hi_off, target, family, lam)
                    n += 1
                acc += total
                left = right
        out[i] = acc
    return failures


class ConfigurationError(ValueError):
    """A flight plan, intent model or decision vector is unusable."""


@dataclass(frozen=True)
class Crossing:
    sector: str
    entry_idx: int
    exit_idx: int


@dataclass(frozen=True)
class FlightPlan:
    """One flight.

    ``inbound`` is the delay law at the first point relative to the takeoff
    target: the first overfly time is ``gamma_1 + delay``.
    """

    id: str
    points: tuple[str, ...]
    durations: tuple[float, ...]
    crossings: tuple[Crossing, ...]
    scheduled_arrival: float
    takeoff_window: tuple[float, float]
    inbound: BoundedDistribution

    def __post_init__(self):
        object.__setattr__(self, "points", tuple(self.points))
        object.__setattr__(self, "durations", tuple(float(d) for d in self.durations))
        object.__setattr__(self, "crossings", tuple(self.crossings))
        object.__setattr__(self, "takeoff_window", tuple(float(v) for v in self.takeoff_window))
        if len(self.points) < 2:
            raise ConfigurationError(f"flight {self.id}: needs at least two points")
        if len(self.durations) != len(self.points) - 1:
            raise ConfigurationError(
                f"flight {self.id}: {len(self.durations)} durations for {len(self.points)} points"
            )
        if any(not d > 0 for d in self.durations):
            raise ConfigurationError(f"flight {self.id}: durations must be positive")
        lo, hi = self.takeoff_window
        if hi < lo:
            raise ConfigurationError(f"flight {self.id}: empty takeoff window")
        last_exit = -1
        for c in sorted(self.crossings, key=lambda c: c.entry_idx):
            if not 0 <= c.entry_idx < c.exit_idx < len(self.points):
                raise ConfigurationError(f"flight {self.id}: bad crossing {c}")
            if c.entry_idx < last_exit:
                raise ConfigurationError(f"flight {self.id}: overlapping crossings")
            last_exit = c.exit_idx

    @property
    def n_points(self) -> int:
        return len(self.points)

    def crossing_for(self, sector: str) -> Crossing:
        for c in self.crossings:
            if c.sector == sector:
                return c
        raise KeyError(f"flight {self.id} does not cross sector {sector}")

    def nominal_targets(self) -> np.ndarray:
        """Targets that arrive exactly on schedule, takeoff clamped to its window."""
        total = sum(self.durations)
        lo, hi = self.takeoff_window
        start = min(max(self.scheduled_arrival - total, lo), hi)
        return start + np.concatenate([[0.0], np.cumsum(self.durations)])


@dataclass(frozen=True)
class IntentModel:
    """Conditional law of the next overfly time given the previous one.

    The support has width ``support_width`` and is centred on the nominal
    segment duration; the mode sits on the target, clamped into the support.
    A zero width gives deterministic segment times.
    """

    family: str
    support_width: float
    lam: float = DEFAULT_LAMBDA

    def __post_init__(self):
        if self.family not in ("triangular", "pert"):
            raise ConfigurationError(f"unknown intent family {self.family!r}")
        if not self.support_width >= 0:
            raise ConfigurationError("support width must be nonnegative")
        if not self.lam > 0:
            raise ConfigurationError("lambda must be positive")

    @property
    def half(self) -> float:
        return 0.5 * self.support_width

    @property
    def deterministic(self) -> bool:
        return self.support_width < 1e-9

    def check_duration(self, d: float) -> None:
        if not d > self.half:
            raise ConfigurationError(
                f"segment duration {d} s does not exceed half the intent support "
                f"({self.half} s): a flight could leave before it enters"
            )

    def bounds(self, t_prev, d):
        return t_prev + d - self.half, t_prev + d + self.half

    def conditional(self, t_prev: float, d: float, target: float) -> BoundedDistribution:
        self.check_duration(d)
        a, b = self.bounds(t_prev, d)
        m = min(max(target, a), b)
        if self.family == "triangular":
            return TriangularDist(a, m, b)
        return PertDist(a, m, b, self.lam)

    def pdf(self, t, t_prev, d, target):
        """Vectorised conditional density of ``t`` given ``t_prev``."""
        lo_off, hi_off = d - self.half, d + self.half
        if self.family == "triangular":
            return _triangular_next_pdf(t, t_prev, lo_off, hi_off, target)
        return _pert_next_pdf(t, t_prev, lo_off, hi_off, target, float(self.lam))

    def sample_next(self, rng: np.random.Generator, t_prev: np.ndarray, d: float, target: float):
        t_prev = np.asarray(t_prev, dtype=float)
        if self.deterministic:
            return t_prev + d
        a, b = self.bounds(t_prev, d)
        m = np.clip(target, a, b)
        if self.family == "triangular":
            return triangular_ppf(rng.random(t_prev.shape), a, m, b)
        alpha, beta = pert_shapes(a, m, b, self.lam)
        return a + rng.beta(alpha, beta) * self.support_width


def conditional(intent: IntentModel, t_prev: float, d: float, target: float) -> BoundedDistribution:
    return intent.conditional(t_prev, d, target)


def check_feasible(flight: FlightPlan, targets: Sequence[float], intent: IntentModel,
                   tol: float = FEASIBILITY_TOL) -> None:
    """Raise :class:`ConfigurationError` unless ``targets`` is feasible."""
    g = np.asarray(targets, dtype=float)
    if g.shape != (flight.n_points,):
        raise ConfigurationError(
            f"flight {flight.id}: expected {flight.n_points} targets, got {g.shape}"
        )
    lo, hi = flight.takeoff_window
    if not lo - tol <= g[0] <= hi + tol:
        raise ConfigurationError(f"flight {flight.id}: takeoff target {g[0]} outside window")
    gaps = np.diff(g) - np.asarray(flight.durations)
    if np.any(np.abs(gaps) > intent.half + tol):
        i = int(np.argmax(np.abs(gaps) > intent.half + tol))
        raise ConfigurationError(
            f"flight {flight.id}: target gap {i}->{i + 1} off nominal by {gaps[i]:.3f} s"
        )


@dataclass(frozen=True)
class MarginalCurve:
    """Density of an overfly time sampled on a uniform grid.

    Between nodes the density is interpolated linearly, so ``cdf`` is
    piecewise quadratic. A curve with ``point`` set is a point mass and has
    no nodes. ``raw_mass`` is the trapezoidal mass before renormalisation.
    """

    start: float
    step: float
    values: np.ndarray
    point: float | None = None
    raw_mass: float = 1.0
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", v)
        if self.point is None:
            cum = np.concatenate([[0.0], np.cumsum(0.5 * (v[1:] + v[:-1]) * self.step)])
        else:
            cum = np.zeros(0)
        object.__setattr__(self, "_cum", cum)

    @classmethod
    def point_mass(cls, at: float, step: float) -> "MarginalCurve":
        return cls(at, step, np.zeros(0), point=float(at))

    @property
    def is_point(self) -> bool:
        return self.point is not None

    @property
    def end(self) -> float:
        if self.is_point:
            return self.point
        return self.start + (len(self.values) - 1) * self.step

    @property
    def nodes(self) -> np.ndarray:
        return self.start + self.step * np.arange(len(self.values))

    def support(self) -> tuple[float, float]:
        return (self.start, self.end)

    def mass(self) -> float:
        return 1.0 if self.is_point else float(self._cum[-1])

    def pdf(self, t):
        if self.is_point:
            raise ValueError("point mass has no density")
        return np.interp(t, self.nodes, self.values, left=0.0, right=0.0)

    def cdf(self, t):
        t = np.asarray(t, dtype=float)
        if self.is_point:
            return np.where(t >= self.point, 1.0, 0.0)
        v = self.values
        u = (t - self.start) / self.step
        k = np.clip(np.floor(u).astype(np.int64), 0, len(v) - 2)
        r = np.clip(t - (self.start + k * self.step), 0.0, self.step)
        slope = (v[k + 1] - v[k]) / self.step
        out = self._cum[k] + v[k] * r + 0.5 * slope * r * r
        out = np.where(t <= self.start, 0.0, out)
        return np.where(t >= self.end, self._cum[-1], out)

    def mean(self) -> float:
        if self.is_point:
            return self.point
        x0 = self.nodes[:-1]
        x1 = x0 + self.step
        y0, y1 = self.values[:-1], self.values[1:]
        first = np.sum(self.step / 6.0 * (y0 * (2 * x0 + x1) + y1 * (x0 + 2 * x1)))
        return float(first / self.mass())


@dataclass(frozen=True)
class SampledTrajectory:
    times: np.ndarray


def _grid_range(lo: float, hi: float, origin: float, step: float) -> tuple[int, int]:
    """Node indices on the flight grid whose span covers ``[lo, hi]``."""
    eps = 1e-9
    i0 = math.floor((lo - origin) / step + eps)
    i1 = math.ceil((hi - origin) / step - eps)
    return i0, max(i1, i0 + 1)


def _renormalised(start, step, values) -> MarginalCurve:
    values = np.maximum(values, 0.0)
    raw = MarginalCurve(start, step, values).mass()
    if not raw > 0:
        raise ConfigurationError("marginal lost all its mass on the grid")
    return MarginalCurve(start, step, values / raw, raw_mass=raw)


def discretise_inbound(flight: FlightPlan, takeoff: float, step: float) -> MarginalCurve:
    law = flight.inbound.shifted(takeoff)
    if law.degenerate:
        return MarginalCurve.point_mass(law.lo, step)
    origin = law.lo
    i0, i1 = _grid_range(law.lo, law.hi, origin, step)
    nodes = origin + step * np.arange(i0, i1 + 1)
    return _renormalised(nodes[0], step, np.asarray(law.pdf(nodes)))


def propagate_step(curve: MarginalCurve, intent: IntentModel, d: float, target: float,
                   origin: float, spec: QuadratureSpec = DEFAULT_SPEC,
                   engine: str = "compiled") -> MarginalCurve:
    """One link of the chain: density of the next overfly time.

    For every output node ``t`` the integral over the previous time ``tau`` of
    ``intent(t | tau) * curve(tau)`` is evaluated adaptively, split at the
    previous grid nodes and at the two values of ``tau`` where the mode stops
    being clamped. ``engine="compiled"`` runs the per-node loop in a compiled
    kernel; ``"numpy"`` uses the batched :func:`integrate_cells` engine.
    """
    step = curve.step
    if intent.deterministic:
        if curve.is_point:
            return MarginalCurve.point_mass(curve.point + d, step)
        return MarginalCurve(curve.start + d, step, curve.values, raw_mass=curve.mass())
    half = intent.half
    lo_out = curve.start + d - half
    hi_out = curve.end + d + half
    i0, i1 = _grid_range(lo_out, hi_out, origin, step)
    t_out = origin + step * np.arange(i0, i1 + 1)
    if curve.is_point:
        return _renormalised(t_out[0], step, np.asarray(intent.pdf(t_out, curve.point, d, target)))

    # tau must satisfy tau + d - half <= t <= tau + d + half
    lo_tau = np.maximum(t_out - d - half, curve.start)
    hi_tau = np.minimum(t_out - d + half, curve.end)
    live = np.flatnonzero(hi_tau > lo_tau)
    lo_tau, hi_tau = lo_tau[live], hi_tau[live]

    kinks = np.union1d(curve.nodes, [target - d - half, target - d + half])
    if engine == "compiled":
        x_ref, w_hi, w_lo = _nested_pair(*CELL_ORDERS)
        out = np.zeros(t_out.size)
        family = 0 if intent.family == "triangular" else 1
        failed = _propagate_nodes(t_out[live], lo_tau, hi_tau, kinks, curve.start, step,
                                  curve.values, d - half, d + half, target, family,
                                  float(intent.lam), 0.5 * (x_ref + 1.0), w_hi, w_lo,
                                  spec.rel_tol, spec.max_subdivisions, out[: live.size])
        if failed:
            raise QuadratureError(f"{failed} cell(s) did not converge", None, None)
        res = np.zeros(t_out.size)
        res[live] = out[: live.size]
        return _renormalised(t_out[0], step, res)
    if engine != "numpy":
        raise ValueError(f"unknown engine {engine!r}")
    j0 = np.searchsorted(kinks, lo_tau, side="right")
    j1 = np.searchsorted(kinks, hi_tau, side="left")
    n_cells = j1 - j0 + 1
    node_of = np.repeat(np.arange(live.size), n_cells)
    first = np.concatenate([[0], np.cumsum(n_cells)[:-1]])
    r = np.arange(node_of.size) - first[node_of]
    last = r == n_cells[node_of] - 1
    left = np.where(r == 0, lo_tau[node_of], kinks[np.minimum(j0[node_of] + r - 1, kinks.size - 1)])
    right = np.where(last, hi_tau[node_of], kinks[np.minimum(j0[node_of] + r, kinks.size - 1)])
    keep = right - left > SLIVER * step
    node_of, left, right = node_of[keep], left[keep], right[keep]

    t_cell = t_out[live][node_of]
    nodes, values = curve.nodes, curve.values

    def integrand(tau, owner):
        t = t_cell[owner]
        return intent.pdf(t, tau, d, target) * np.interp(tau, nodes, values)

    cell_val, _ = integrate_cells(integrand, left, right, spec, abs_tol=1e-12 * (right - left),
                                  orders=CELL_ORDERS)
    out = np.zeros(t_out.size)
    out[live] = np.bincount(node_of, cell_val, minlength=live.size)
    return _renormalised(t_out[0], step, out)


def propagate_marginals(flight: FlightPlan, targets: Sequence[float], intent: IntentModel,
                        step: float = 1.0, spec: QuadratureSpec = DEFAULT_SPEC,
                        engine: str = "compiled") -> list[MarginalCurve]:
    """Marginal density of every overfly time of ``flight``, in point order."""
    if not step > 0:
        raise ConfigurationError("grid step must be positive")
    if not intent.deterministic and step > intent.support_width:
        raise ConfigurationError(
            f"grid step {step} s is coarser than the intent support {intent.support_width} s"
        )
    g = np.asarray(targets, dtype=float)
    check_feasible(flight, g, intent)
    for d in flight.durations:
        intent.check_duration(d)
    curve = discretise_inbound(flight, g[0], step)
    origin = curve.start
    curves = [curve]
    for i, d in enumerate(flight.durations):
        curve = propagate_step(curve, intent, d, g[i + 1], origin, spec, engine)
        curves.append(curve)
    return curves


def presence_probability(marginals: Sequence[MarginalCurve], crossing: Crossing | tuple[int, int],
                         t, clip: bool = True):
    """Probability the flight is between the crossing's entry and exit points at ``t``."""
    if isinstance(crossing, Crossing):
        entry, exit_ = crossing.entry_idx, crossing.exit_idx
    else:
        entry, exit_ = crossing
    p = marginals[entry].cdf(t) - marginals[exit_].cdf(t)
    if clip:
        p = np.clip(p, 0.0, 1.0)
    return float(p) if np.ndim(p) == 0 else p


def sample_trajectories(flight: FlightPlan, targets: Sequence[float], intent: IntentModel,
                        rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` forward-sampled trajectories, shape ``(n, n_points)``."""
    g = np.asarray(targets, dtype=float)
    out = np.empty((n, flight.n_points))
    out[:, 0] = g[0] + np.asarray(flight.inbound.sample(rng, n))
    for i, d in enumerate(flight.durations):
        out[:, i + 1] = intent.sample_next(rng, out[:, i], d, g[i + 1])
    return out


def forward_sample(flight: FlightPlan, targets: Sequence[float], intent: IntentModel,
                   rng: np.random.Generator) -> SampledTrajectory:
    return SampledTrajectory(sample_trajectories(flight, targets, intent, rng, 1)[0])
