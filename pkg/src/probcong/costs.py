"""Expected delay and congestion costs on the quadrature backend."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .congestion import excess_moment, pb_pmf_dp_batch, presence_matrix
from .flightmodel import Crossing, MarginalCurve, propagate_marginals
from .quad import DEFAULT_SPEC, QuadratureSpec, integrate_piecewise
from .scenario import Airspace, DecisionVector, Scenario

__all__ = [
    "Airspace",
    "CostReport",
    "expected_delay_cost",
    "expected_congestion_cost",
    "total_delay_cost",
    "total_congestion_cost",
    "scenario_marginals",
]


@dataclass(frozen=True)
class CostReport:
    value: float
    error_estimate: float
    breakdown: Mapping[str, float] = field(default_factory=dict)


def expected_delay_cost(final: MarginalCurve, scheduled_arrival: float,
                        spec: QuadratureSpec = DEFAULT_SPEC) -> CostReport:
    """Expected squared lateness ``E[(t - A)_+^2]`` under the last-point marginal."""
    a = float(scheduled_arrival)
    if final.is_point:
        late = max(final.point - a, 0.0)
        return CostReport(late * late, 0.0)
    lo, hi = final.support()
    if hi <= a:
        return CostReport(0.0, 0.0)
    # the density is linear between nodes: one breakpoint per node past A
    nodes = final.nodes
    pts = np.concatenate([[max(lo, a)], nodes[(nodes > a) & (nodes < hi)], [hi]])
    value, err = integrate_piecewise(lambda t: (t - a) ** 2 * final.pdf(t), pts, spec)
    return CostReport(max(value, 0.0), err)


def _flight_breakpoints(marginals: Sequence[MarginalCurve], crossing: Crossing) -> list[float]:
    out = []
    for curve in (marginals[crossing.entry_idx], marginals[crossing.exit_idx]):
        out.extend(curve.support())
    return out


def expected_congestion_cost(
    sector: str,
    flights: Sequence[tuple[Sequence[MarginalCurve], Crossing]],
    capacity: int,
    horizon: tuple[float, float],
    spec: QuadratureSpec = DEFAULT_SPEC,
) -> CostReport:
    """Integral over ``horizon`` of the expected squared overload of ``sector``.

    ``flights`` lists ``(marginals, crossing)`` for each crossing flight.
    """
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    if len(flights) <= capacity:
        return CostReport(0.0, 0.0, {sector: 0.0})
    h0, h1 = horizon
    pts = [h0, h1]
    for m, c in flights:
        pts.extend(_flight_breakpoints(m, c))
    pts = np.unique(np.clip(pts, h0, h1))

    def integrand(t):
        shape = np.shape(t)
        flat = np.ravel(t)
        p = presence_matrix(flights, flat)
        # only flights with some presence contribute to N
        p = p[:, np.any(p > 0, axis=0)]
        if p.shape[1] <= capacity:
            return np.zeros(shape)
        return excess_moment(pb_pmf_dp_batch(p), capacity).reshape(shape)

    value, err = integrate_piecewise(integrand, pts, spec)
    value = max(value, 0.0)
    return CostReport(value, err, {sector: value})


def scenario_marginals(scenario: Scenario, gamma: DecisionVector | None = None, step: float = 1.0,
                       spec: QuadratureSpec = DEFAULT_SPEC, flights=None) -> dict[str, list[MarginalCurve]]:
    gamma = scenario.nominal_decision() if gamma is None else gamma
    chosen = scenario.flights if flights is None else flights
    return {f.id: propagate_marginals(f, gamma[f.id], scenario.intent, step, spec) for f in chosen}


def total_delay_cost(scenario: Scenario, marginals: Mapping[str, Sequence[MarginalCurve]],
                     spec: QuadratureSpec = DEFAULT_SPEC) -> CostReport:
    parts, errs = {}, 0.0
    for f in scenario.flights:
        r = expected_delay_cost(marginals[f.id][-1], f.scheduled_arrival, spec)
        parts[f.id] = r.value
        errs += r.error_estimate
    return CostReport(sum(parts.values()), errs, parts)


def sector_inputs(scenario: Scenario, marginals: Mapping[str, Sequence[MarginalCurve]],
                  sector: str) -> list[tuple[Sequence[MarginalCurve], Crossing]]:
    return [(marginals[f.id], f.crossing_for(sector)) for f in scenario.sector_flights(sector)]


def total_congestion_cost(scenario: Scenario, marginals: Mapping[str, Sequence[MarginalCurve]],
                          spec: QuadratureSpec = DEFAULT_SPEC) -> CostReport:
    parts, errs = {}, 0.0
    horizon = scenario.airspace.cost_horizon
    for s in scenario.airspace.sectors:
        r = expected_congestion_cost(s.id, sector_inputs(scenario, marginals, s.id), s.capacity,
                                     horizon, spec)
        parts[s.id] = r.value
        errs += r.error_estimate
    return CostReport(sum(parts.values()), errs, parts)
