"""Scenario data model, JSON files, and the two benchmark generators."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Sequence

import jsonschema
import numpy as np

from .dist import (
    DEFAULT_LAMBDA,
    BoundedDistribution,
    DistributionError,
    PiecewiseLinearDist,
    from_record,
)
from .flightmodel import ConfigurationError, Crossing, FlightPlan, IntentModel, check_feasible

# Departure-delay summary to reproduce: share of flights delayed by at least
# 5 and 15 minutes, on a support ending at one hour.
CODA_TAIL_300 = 0.36
CODA_TAIL_900 = 0.16
CODA_MAX_DELAY = 3600.0

DecisionVector = dict  # flight id -> array of per-point targets (s)


class ScenarioError(ValueError):
    """Schema or consistency violation; the message starts with the field path."""


@dataclass(frozen=True)
class Sector:
    id: str
    capacity: int


@dataclass(frozen=True)
class Airspace:
    sectors: tuple[Sector, ...]
    horizon: tuple[float, float]
    congestion_horizon: tuple[float, float] | None = None

    def __post_init__(self):
        lo, hi = self.horizon
        if not hi > lo:
            raise ScenarioError("horizon: must be a nonempty [start, end] interval")
        if self.congestion_horizon is not None:
            clo, chi = self.congestion_horizon
            if not (lo <= clo < chi <= hi):
                raise ScenarioError("congestion_horizon: must be a nonempty sub-interval of horizon")
        for i, s in enumerate(self.sectors):
            if isinstance(s.capacity, bool) or not isinstance(s.capacity, int) or s.capacity < 0:
                raise ScenarioError(f"sectors[{i}].capacity: must be a nonnegative integer")

    @property
    def cost_horizon(self) -> tuple[float, float]:
        return self.congestion_horizon or self.horizon

    def capacity(self, sector: str) -> int:
        for s in self.sectors:
            if s.id == sector:
                return s.capacity
        raise KeyError(sector)


@dataclass(frozen=True)
class Scenario:
    airspace: Airspace
    flights: tuple[FlightPlan, ...]
    intent: IntentModel

    def __post_init__(self):
        object.__setattr__(self, "flights", tuple(self.flights))
        known = {s.id for s in self.airspace.sectors}
        if len(known) != len(self.airspace.sectors):
            raise ScenarioError("sectors: duplicate sector id")
        seen = set()
        for i, f in enumerate(self.flights):
            if f.id in seen:
                raise ScenarioError(f"flights[{i}].id: duplicate flight id {f.id!r}")
            seen.add(f.id)
            for j, c in enumerate(f.crossings):
                if c.sector not in known:
                    raise ScenarioError(
                        f"flights[{i}].crossings[{j}].sector: unknown sector {c.sector!r}"
                    )
            try:
                for d in f.durations:
                    self.intent.check_duration(d)
                check_feasible(f, f.nominal_targets(), self.intent)
            except ConfigurationError as exc:
                raise ScenarioError(f"flights[{i}]: {exc}") from None

    def flight(self, flight_id: str) -> FlightPlan:
        for f in self.flights:
            if f.id == flight_id:
                return f
        raise KeyError(flight_id)

    def sector_flights(self, sector: str) -> list[FlightPlan]:
        """Flights crossing ``sector``, in scenario order."""
        return [f for f in self.flights if any(c.sector == sector for c in f.crossings)]

    def nominal_decision(self) -> DecisionVector:
        return {f.id: f.nominal_targets() for f in self.flights}

    def check_decision(self, gamma: Mapping[str, Sequence[float]]) -> None:
        for f in self.flights:
            if f.id not in gamma:
                raise ConfigurationError(f"decision vector lacks flight {f.id}")
            check_feasible(f, gamma[f.id], self.intent)


def coda_delay_distribution() -> PiecewiseLinearDist:
    """Continuous piecewise-linear departure-delay density (seconds).

    Knots at 0, 5 min, 15 min and one hour; the three segment masses are
    solved so that P(delay >= 300 s) and P(delay >= 900 s) hit the summary
    shares exactly, with the density vanishing at one hour.
    """
    early = 1.0 - CODA_TAIL_300
    middle = CODA_TAIL_300 - CODA_TAIL_900
    tail = CODA_TAIL_900
    h900 = 2.0 * tail / (CODA_MAX_DELAY - 900.0)
    h300 = 2.0 * middle / 600.0 - h900
    h0 = 2.0 * early / 300.0 - h300
    return PiecewiseLinearDist(((0.0, h0), (300.0, h300), (900.0, h900), (CODA_MAX_DELAY, 0.0)))


# ---------------------------------------------------------------------------
# JSON I/O

_NUM = {"type": "number"}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "required": ["horizon", "sectors", "intent", "flights"],
    "properties": {
        "horizon": _PAIR,
        "congestion_horizon": _PAIR,
        "sectors": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "capacity"],
                "properties": {
                    "id": {"type": "string"},
                    "capacity": {"type": "integer", "minimum": 0},
                },
            },
        },
        "intent": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "support_s"],
            "properties": {
                "family": {"enum": ["triangular", "pert"]},
                "support_s": {"type": "number", "minimum": 0},
                "lambda": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "flights": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": [
                    "id", "points", "durations", "crossings",
                    "scheduled_arrival", "takeoff_window", "inbound",
                ],
                "properties": {
                    "id": {"type": "string"},
                    "points": {"type": "array", "items": {"type": "string"}, "minItems": 2},
                    "durations": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
                    "crossings": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["sector", "entry_idx", "exit_idx"],
                            "properties": {
                                "sector": {"type": "string"},
                                "entry_idx": {"type": "integer", "minimum": 0},
                                "exit_idx": {"type": "integer", "minimum": 0},
                            },
                        },
                    },
                    "scheduled_arrival": _NUM,
                    "takeoff_window": _PAIR,
                    "inbound": {"type": "object", "required": ["kind"]},
                },
            },
        },
    },
}


def _field_path(parts) -> str:
    out = ""
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else (f".{p}" if out else str(p))
    return out or "<root>"


def from_dict(data: Mapping[str, Any]) -> Scenario:
    errors = sorted(jsonschema.Draft7Validator(SCHEMA).iter_errors(data),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        raise ScenarioError(f"{_field_path(e.absolute_path)}: {e.message}")
    sectors = tuple(Sector(s["id"], int(s["capacity"])) for s in data["sectors"])
    ch = data.get("congestion_horizon")
    airspace = Airspace(sectors, tuple(map(float, data["horizon"])), tuple(map(float, ch)) if ch else None)
    it = data["intent"]
    try:
        intent = IntentModel(it["family"], float(it["support_s"]), float(it.get("lambda", DEFAULT_LAMBDA)))
    except ConfigurationError as exc:
        raise ScenarioError(f"intent: {exc}") from None
    flights = []
    for i, rec in enumerate(data["flights"]):
        try:
            inbound = from_record(rec["inbound"], path=f"flights[{i}].inbound")
        except DistributionError as exc:
            raise ScenarioError(str(exc)) from None
        try:
            flights.append(FlightPlan(
                id=rec["id"],
                points=tuple(rec["points"]),
                durations=tuple(float(d) for d in rec["durations"]),
                crossings=tuple(Crossing(c["sector"], int(c["entry_idx"]), int(c["exit_idx"]))
                                for c in rec["crossings"]),
                scheduled_arrival=float(rec["scheduled_arrival"]),
                takeoff_window=tuple(float(v) for v in rec["takeoff_window"]),
                inbound=inbound,
            ))
        except ConfigurationError as exc:
            raise ScenarioError(f"flights[{i}]: {exc}") from None
    return Scenario(airspace, tuple(flights), intent)


def to_dict(scenario: Scenario) -> dict[str, Any]:
    a = scenario.airspace
    out: dict[str, Any] = {"horizon": list(a.horizon)}
    if a.congestion_horizon is not None:
        out["congestion_horizon"] = list(a.congestion_horizon)
    out["sectors"] = [{"id": s.id, "capacity": s.capacity} for s in a.sectors]
    intent = {"family": scenario.intent.family, "support_s": scenario.intent.support_width}
    if scenario.intent.family == "pert":
        intent["lambda"] = scenario.intent.lam
    out["intent"] = intent
    out["flights"] = [
        {
            "id": f.id,
            "points": list(f.points),
            "durations": list(f.durations),
            "crossings": [{"sector": c.sector, "entry_idx": c.entry_idx, "exit_idx": c.exit_idx}
                          for c in f.crossings],
            "scheduled_arrival": f.scheduled_arrival,
            "takeoff_window": list(f.takeoff_window),
            "inbound": f.inbound.to_record(),
        }
        for f in scenario.flights
    ]
    return out


def dumps(scenario: Scenario) -> str:
    return json.dumps(to_dict(scenario), indent=1) + "\n"


def save(scenario: Scenario, path) -> None:
    Path(path).write_text(dumps(scenario), encoding="utf-8")


def load(path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"<root>: invalid JSON ({exc})") from None
    return from_dict(data)


def load_decision(path) -> DecisionVector:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict):
        raise ScenarioError("<root>: decision file must map flight ids to target lists")
    return {k: np.asarray(v, dtype=float) for k, v in data.items()}


def save_decision(gamma: Mapping[str, Sequence[float]], path) -> None:
    data = {k: [float(x) for x in v] for k, v in gamma.items()}
    Path(path).write_text(json.dumps(data, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# generators


def _horizon_end(latest_takeoff: float, inbound: BoundedDistribution, route: float, n_seg: int,
                 half: float) -> float:
    end = latest_takeoff + inbound.hi + route + n_seg * half
    return float(math.ceil(end / 100.0) * 100.0)


def gen_corridor(
    n_sectors: int = 11,
    crossing: float = 600.0,
    takeoff: tuple[float, float] = (300.0, 3600.0),
    target_arrival: float = 7800.0,
    family: str = "triangular",
    support: float = 180.0,
    lam: float = DEFAULT_LAMBDA,
    capacity: int = 1,
    inbound: BoundedDistribution | None = None,
) -> Scenario:
    """A single flight through a line of ``n_sectors`` sectors."""
    if n_sectors < 1 or not crossing > 0:
        raise ValueError("n_sectors and crossing must be positive")
    inbound = coda_delay_distribution() if inbound is None else inbound
    intent = IntentModel(family, support, lam)
    sectors = tuple(Sector(f"S{i}", capacity) for i in range(n_sectors))
    flight = FlightPlan(
        id="F0",
        points=tuple(f"P{i}" for i in range(n_sectors + 1)),
        durations=(float(crossing),) * n_sectors,
        crossings=tuple(Crossing(f"S{i}", i, i + 1) for i in range(n_sectors)),
        scheduled_arrival=float(target_arrival),
        takeoff_window=(float(takeoff[0]), float(takeoff[1])),
        inbound=inbound,
    )
    end = _horizon_end(takeoff[1], inbound, n_sectors * crossing, n_sectors, intent.half)
    return Scenario(Airspace(sectors, (0.0, max(end, target_arrival))), (flight,), intent)


def grid_sector_id(row: int, col: int) -> str:
    return f"R{row}C{col}"


def grid_routes(rows: int, cols: int) -> list[tuple[str, list[tuple[int, int]]]]:
    """Straight routes across the grid, grouped four by four into rotation orbits.

    On a square grid each group of four consecutive routes is the orbit of an
    eastbound route under quarter turns ``(r, c) -> (c, n - 1 - r)``.
    """
    routes = []
    for lane in range(max(rows, cols)):
        if lane < rows:
            routes.append((f"E{lane}", [(lane, c) for c in range(cols)]))
        if lane < cols:
            k = cols - 1 - lane
            routes.append((f"S{k}", [(r, k) for r in range(rows)]))
        if lane < rows:
            k = rows - 1 - lane
            routes.append((f"W{k}", [(k, c) for c in reversed(range(cols))]))
        if lane < cols:
            routes.append((f"N{lane}", [(r, lane) for r in reversed(range(rows))]))
    return routes


def rotate_sector(sector: str, n: int) -> str:
    """Image of a square-grid sector id under a quarter turn."""
    r, c = sector[1:].split("C")
    r, c = int(r), int(c)
    return grid_sector_id(c, n - 1 - r)


def default_grid_capacity(row: int, col: int, rows: int, cols: int) -> int:
    """Capacity by ring around the centre: 2 in the two central rings, 3 outside.

    Symmetric under quarter turns on square grids; the busy centre saturates
    while the outer rings see occasional overloads.
    """
    ring = max(abs(2 * row - (rows - 1)), abs(2 * col - (cols - 1))) // 2
    return 2 if ring <= 1 else 3


def gen_grid(
    rows: int = 11,
    cols: int = 11,
    n_flights: int = 192,
    horizon: float = 9000.0,
    crossing: float = 600.0,
    family: str = "triangular",
    support: float = 180.0,
    lam: float = DEFAULT_LAMBDA,
    window: float = 600.0,
    capacity=default_grid_capacity,
    inbound: BoundedDistribution | None = None,
) -> Scenario:
    """Flights crossing a ``rows x cols`` grid of sectors from every direction.

    Flight ``k`` flies route ``k mod n_routes``; departures are staggered in
    groups of four consecutive flights, spread uniformly over the part of the
    horizon that still lets a nominal flight finish. ``capacity`` maps
    ``(row, col, rows, cols)`` to a sector capacity.
    """
    if n_flights < 1:
        raise ValueError("n_flights must be >= 1")
    inbound = coda_delay_distribution() if inbound is None else inbound
    intent = IntentModel(family, support, lam)
    sectors = tuple(
        Sector(grid_sector_id(r, c), int(capacity(r, c, rows, cols)))
        for r in range(rows) for c in range(cols)
    )
    routes = grid_routes(rows, cols)
    groups = math.ceil(n_flights / 4)
    flights = []
    for k in range(n_flights):
        name, cells = routes[k % len(routes)]
        length = len(cells) * crossing
        slack = max(horizon - length - window, 0.0)
        depart = (k // 4) * slack / groups
        flights.append(FlightPlan(
            id=f"F{k:03d}-{name}",
            points=tuple(f"{name}.{i}" for i in range(len(cells) + 1)),
            durations=(float(crossing),) * len(cells),
            crossings=tuple(Crossing(grid_sector_id(r, c), i, i + 1) for i, (r, c) in enumerate(cells)),
            scheduled_arrival=depart + length,
            takeoff_window=(depart, depart + window),
            inbound=inbound,
        ))
    return Scenario(Airspace(sectors, (0.0, float(horizon))), tuple(flights), intent)


def sample_decision_vector(scenario: Scenario, rng: np.random.Generator) -> DecisionVector:
    """Uniform draw over the feasible set, point by point."""
    half = scenario.intent.half
    out = {}
    for f in scenario.flights:
        g = np.empty(f.n_points)
        g[0] = rng.uniform(*f.takeoff_window)
        for i, d in enumerate(f.durations):
            g[i + 1] = rng.uniform(g[i] + d - half, g[i] + d + half)
        out[f.id] = g
    return out
