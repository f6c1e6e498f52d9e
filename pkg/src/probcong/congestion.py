"""Sector occupancy counts as Poisson-Binomial laws."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .flightmodel import Crossing, MarginalCurve, presence_probability

# presence below this counts as absent
PRESENCE_THRESHOLD = 1e-12
# largest count handled by plain convolution in occupancy_at
DP_MAX_FLIGHTS = 64
# residues beyond this signal a bug rather than roundoff
RESIDUE_LIMIT = 1e-8


class OccupancyError(ArithmeticError):
    pass


@dataclass(frozen=True)
class OccupancyDistribution:
    pmf: np.ndarray

    @property
    def n_max(self) -> int:
        return len(self.pmf) - 1

    def mean(self) -> float:
        return float(np.arange(len(self.pmf)) @ self.pmf)

    def var(self) -> float:
        n = np.arange(len(self.pmf))
        m = n @ self.pmf
        return float(((n - m) ** 2) @ self.pmf)


@dataclass(frozen=True)
class PresenceVector:
    sector: str
    t: float
    flights: tuple[str, ...]
    probs: np.ndarray


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float).ravel()
    if np.any(~np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ValueError("presence probabilities must lie in [0, 1]")
    return p


def pb_pmf_dp(probs) -> OccupancyDistribution:
    """Exact pmf by folding one Bernoulli at a time."""
    p = _check_probs(probs)
    pmf = np.ones(1)
    for q in p:
        nxt = np.empty(pmf.size + 1)
        nxt[:-1] = pmf * (1.0 - q)
        nxt[-1] = 0.0
        nxt[1:] += pmf * q
        pmf = nxt
    return OccupancyDistribution(pmf)


def pb_pmf_dft(probs) -> OccupancyDistribution:
    """pmf from the characteristic function sampled at the N+1 roots of unity."""
    p = _check_probs(probs)
    n = p.size
    size = n + 1
    l = np.arange(size)
    z = np.exp(2j * np.pi * l / size)
    # characteristic function at w*l, as a product over flights
    phi = np.prod(1.0 - p[None, :] + p[None, :] * z[:, None], axis=1)
    # direct O(N^2) inverse transform of the exact size
    kernel = np.exp(-2j * np.pi * np.outer(l, l) / size)
    raw = kernel @ phi / size
    imag = np.abs(raw.imag)
    real = raw.real
    worst = max(float(imag.max(initial=0.0)), float(-real.min(initial=0.0)))
    if worst > RESIDUE_LIMIT:
        raise OccupancyError(f"transform residue {worst:.3g} exceeds {RESIDUE_LIMIT}")
    pmf = np.clip(real, 0.0, None)
    return OccupancyDistribution(pmf / pmf.sum())


def pb_pmf_dp_batch(probs: np.ndarray) -> np.ndarray:
    """Convolution for many instants at once: ``probs`` is ``(T, N)``, result ``(T, N+1)``."""
    p = np.asarray(probs, dtype=float)
    t, n = p.shape
    pmf = np.zeros((t, n + 1))
    pmf[:, 0] = 1.0
    for j in range(n):
        q = p[:, j : j + 1]
        head = pmf[:, : j + 2].copy()
        pmf[:, : j + 2] = head * (1.0 - q)
        pmf[:, 1 : j + 2] += head[:, : j + 1] * q
    return pmf


def presence_vector(sector: str, flights: Sequence[tuple[str, Sequence[MarginalCurve], Crossing]],
                    t: float) -> PresenceVector:
    ids, probs = [], []
    for fid, marginals, crossing in flights:
        q = presence_probability(marginals, crossing, t)
        if q > PRESENCE_THRESHOLD:
            ids.append(fid)
            probs.append(q)
    return PresenceVector(sector, float(t), tuple(ids), np.asarray(probs, dtype=float))


def occupancy_at(sector: str, flights: Sequence[tuple[str, Sequence[MarginalCurve], Crossing]],
                 t: float) -> OccupancyDistribution:
    """Occupancy law of ``sector`` at ``t``.

    ``flights`` holds ``(flight id, marginals, crossing)`` for every flight
    crossing the sector.
    """
    pv = presence_vector(sector, flights, t)
    if pv.probs.size <= DP_MAX_FLIGHTS:
        return pb_pmf_dp(pv.probs)
    return pb_pmf_dft(pv.probs)


def overload_probability(occ: OccupancyDistribution, capacity: int) -> float:
    if capacity < 0:
        raise ValueError("capacity must be >= 0")
    return float(np.sum(occ.pmf[capacity + 1 :]))


def excess_moment(pmf: np.ndarray, capacity: int) -> np.ndarray:
    """``sum_{n > C} (n - C)^2 pmf[..., n]`` along the last axis."""
    pmf = np.asarray(pmf)
    n = np.arange(pmf.shape[-1])
    w = np.where(n > capacity, (n - capacity) ** 2, 0).astype(float)
    return pmf @ w


def presence_matrix(flights: Sequence[tuple[Sequence[MarginalCurve], Crossing]], t) -> np.ndarray:
    """Presence probabilities, shape ``(len(t), n_flights)``; tiny values set to 0."""
    t = np.asarray(t, dtype=float)
    cols = [presence_probability(m, c, t) for m, c in flights]
    p = np.column_stack(cols) if cols else np.zeros((t.size, 0))
    return np.where(p > PRESENCE_THRESHOLD, p, 0.0)
