"""Bounded univariate distributions for inbound and intent models.

Three families are supported: triangular, PERT (a Beta law rescaled onto
``[min, max]``) and piecewise-linear densities. All of them are immutable and
expose ``pdf``, ``cdf``, ``sample`` and ``support``. The element-wise helpers
``triangular_pdf``/``pert_pdf`` accept broadcast arrays of parameters; the
flight model relies on them to evaluate millions of conditional densities in
one call.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from numba import vectorize
from scipy import special

# Supports narrower than this collapse to a point mass.
DEGENERATE_WIDTH = 1e-9
DEFAULT_LAMBDA = 4.0


class DistributionError(ValueError):
    """Invalid distribution parameters."""


@vectorize(["float64(float64, float64, float64, float64)"], cache=True)
def triangular_pdf(x, a, m, b):
    """Triangular density as a ufunc over broadcast arrays.

    Handles a mode sitting on either endpoint. Zero outside ``[a, b]``.
    """
    if x < a or x > b:
        return 0.0
    width = b - a
    # both branches may be evaluated eagerly: keep denominators nonzero
    left = m - a if m > a else 1.0
    right = b - m if b > m else 1.0
    if x < m:
        return 2.0 * (x - a) / (width * left)
    if b <= m:
        return 2.0 / width
    return 2.0 * (b - x) / (width * right)


def triangular_cdf(x, a, m, b):
    x, a, m, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, a, m, b)))
    width = b - a
    with np.errstate(divide="ignore", invalid="ignore"):
        lower = (x - a) ** 2 / (width * (m - a))
        upper = 1.0 - (b - x) ** 2 / (width * (b - m))
    out = np.where(x < m, lower, upper)
    out = np.where(x <= a, 0.0, out)
    return np.where(x >= b, 1.0, out)


def triangular_ppf(u, a, m, b):
    u, a, m, b = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (u, a, m, b)))
    width = b - a
    split = (m - a) / width
    lo = a + np.sqrt(u * width * (m - a))
    hi = b - np.sqrt((1.0 - u) * width * (b - m))
    return np.where(u < split, lo, hi)


def pert_shapes(a, m, b, lam):
    """Beta shape parameters ``(alpha, beta)`` of a PERT law."""
    width = np.asarray(b, dtype=float) - a
    alpha = 1.0 + lam * (np.asarray(m, dtype=float) - a) / width
    beta = 1.0 + lam * (b - np.asarray(m, dtype=float)) / width
    return alpha, beta


@vectorize(["float64(float64, float64, float64, float64, float64)"], cache=True)
def pert_pdf(x, a, m, b, lam):
    if x < a or x > b:
        return 0.0
    width = b - a
    alpha = 1.0 + lam * (m - a) / width
    beta = 1.0 + lam * (b - m) / width
    z = (x - a) / width
    # alpha + beta == 2 + lam
    log_norm = math.lgamma(2.0 + lam) - math.lgamma(alpha) - math.lgamma(beta)
    out = math.exp(log_norm) / width
    # alpha, beta >= 1: the 0 ** 0 case stays 1
    if alpha != 1.0:
        out *= z ** (alpha - 1.0)
    if beta != 1.0:
        out *= (1.0 - z) ** (beta - 1.0)
    return out


def pert_cdf(x, a, m, b, lam=DEFAULT_LAMBDA):
    x, a, m, b, lam = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (x, a, m, b, lam))
    )
    alpha, beta = pert_shapes(a, m, b, lam)
    z = np.clip((x - a) / (b - a), 0.0, 1.0)
    return special.betainc(alpha, beta, z)


def _scalar(value):
    arr = np.asarray(value)
    return float(arr) if arr.ndim == 0 else arr


class BoundedDistribution:
    """Common interface: a law with compact support ``[lo, hi]``."""

    kind: str = ""

    @property
    def lo(self) -> float:
        raise NotImplementedError

    @property
    def hi(self) -> float:
        raise NotImplementedError

    @property
    def degenerate(self) -> bool:
        return self.hi - self.lo < DEGENERATE_WIDTH

    def support(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def pdf(self, x):
        if self.degenerate:
            raise DistributionError("point mass has no density")
        return _scalar(self._pdf(np.asarray(x, dtype=float)))

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        if self.degenerate:
            return _scalar(np.where(x >= self.lo, 1.0, 0.0))
        return _scalar(np.clip(self._cdf(x), 0.0, 1.0))

    def sample(self, rng: np.random.Generator, size=None):
        if self.degenerate:
            out = np.full(() if size is None else size, self.lo)
            return _scalar(out)
        return _scalar(self._sample(rng, size))

    def mean(self) -> float:
        raise NotImplementedError

    def var(self) -> float:
        raise NotImplementedError

    def shifted(self, offset: float) -> "BoundedDistribution":
        raise NotImplementedError

    def to_record(self) -> dict[str, Any]:
        raise NotImplementedError

    # subclasses implement these on non-degenerate supports
    def _pdf(self, x):
        raise NotImplementedError

    def _cdf(self, x):
        raise NotImplementedError

    def _sample(self, rng, size):
        raise NotImplementedError


def _check_three_point(lo: float, mode: float, hi: float) -> None:
    if not all(np.isfinite(v) for v in (lo, mode, hi)):
        raise DistributionError("parameters must be finite")
    if hi < lo:
        raise DistributionError(f"min {lo} exceeds max {hi}")
    if not lo <= mode <= hi:
        raise DistributionError(f"mode {mode} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class TriangularDist(BoundedDistribution):
    min: float
    mode: float
    max: float
    kind = "triangular"

    def __post_init__(self):
        _check_three_point(self.min, self.mode, self.max)

    @property
    def lo(self):
        return self.min

    @property
    def hi(self):
        return self.max

    def _pdf(self, x):
        return triangular_pdf(x, self.min, self.mode, self.max)

    def _cdf(self, x):
        return triangular_cdf(x, self.min, self.mode, self.max)

    def _sample(self, rng, size):
        u = rng.random(size)
        return triangular_ppf(u, self.min, self.mode, self.max)

    def mean(self):
        return (self.min + self.mode + self.max) / 3.0

    def var(self):
        a, c, b = self.min, self.mode, self.max
        return (a * a + b * b + c * c - a * b - a * c - b * c) / 18.0

    def shifted(self, offset):
        return TriangularDist(self.min + offset, self.mode + offset, self.max + offset)

    def to_record(self):
        return {"kind": "triangular", "min": self.min, "mode": self.mode, "max": self.max}


@dataclass(frozen=True)
class PertDist(BoundedDistribution):
    min: float
    mode: float
    max: float
    lam: float = DEFAULT_LAMBDA
    kind = "pert"

    def __post_init__(self):
        _check_three_point(self.min, self.mode, self.max)
        if not self.lam > 0:
            raise DistributionError(f"lambda must be positive, got {self.lam}")

    @property
    def lo(self):
        return self.min

    @property
    def hi(self):
        return self.max

    @property
    def shapes(self) -> tuple[float, float]:
        a, b = pert_shapes(self.min, self.mode, self.max, self.lam)
        return float(a), float(b)

    def _pdf(self, x):
        return pert_pdf(x, self.min, self.mode, self.max, float(self.lam))

    def _cdf(self, x):
        return pert_cdf(x, self.min, self.mode, self.max, self.lam)

    def _sample(self, rng, size):
        alpha, beta = self.shapes
        return self.min + rng.beta(alpha, beta, size) * (self.max - self.min)

    def mean(self):
        alpha, beta = self.shapes
        return self.min + alpha / (alpha + beta) * (self.max - self.min)

    def var(self):
        alpha, beta = self.shapes
        total = alpha + beta
        return alpha * beta / (total * total * (total + 1.0)) * (self.max - self.min) ** 2

    def shifted(self, offset):
        return PertDist(self.min + offset, self.mode + offset, self.max + offset, self.lam)

    def to_record(self):
        return {
            "kind": "pert",
            "min": self.min,
            "mode": self.mode,
            "max": self.max,
            "lambda": self.lam,
        }


@dataclass(frozen=True)
class PiecewiseLinearDist(BoundedDistribution):
    """Continuous piecewise-linear density through ``knots``.

    Knot densities are rescaled at construction so the trapezoidal area is 1;
    ``knots`` keeps the values as given so records round-trip unchanged.
    """

    knots: tuple[tuple[float, float], ...]
    kind = "pwl"
    _x: np.ndarray = field(init=False, repr=False, compare=False)
    _y: np.ndarray = field(init=False, repr=False, compare=False)
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        pts = np.asarray(self.knots, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise DistributionError("need at least two (time, density) knots")
        x, y = pts[:, 0], pts[:, 1]
        if not np.all(np.isfinite(pts)):
            raise DistributionError("knots must be finite")
        if np.any(np.diff(x) <= 0):
            raise DistributionError("knot times must be strictly increasing")
        if np.any(y < 0):
            raise DistributionError("knot densities must be nonnegative")
        area = np.sum(0.5 * (y[1:] + y[:-1]) * np.diff(x))
        if not area > 0:
            raise DistributionError("knot densities integrate to zero")
        y = y / area
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(x))])
        object.__setattr__(self, "knots", tuple((float(a), float(b)) for a, b in pts))
        object.__setattr__(self, "_x", x)
        object.__setattr__(self, "_y", y)
        object.__setattr__(self, "_cum", cum)

    @property
    def lo(self):
        return float(self._x[0])

    @property
    def hi(self):
        return float(self._x[-1])

    def _pdf(self, x):
        return np.interp(x, self._x, self._y, left=0.0, right=0.0)

    def _cdf(self, x):
        xs, ys = self._x, self._y
        k = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, len(xs) - 2)
        u = np.clip(x - xs[k], 0.0, xs[k + 1] - xs[k])
        slope = (ys[k + 1] - ys[k]) / (xs[k + 1] - xs[k])
        out = self._cum[k] + ys[k] * u + 0.5 * slope * u * u
        return np.where(x >= xs[-1], 1.0, np.where(x <= xs[0], 0.0, out))

    def ppf(self, u):
        """Inverse cdf by solving the per-segment quadratic."""
        u = np.asarray(u, dtype=float) * self._cum[-1]
        xs, ys = self._x, self._y
        k = np.clip(np.searchsorted(self._cum, u, side="right") - 1, 0, len(xs) - 2)
        rest = u - self._cum[k]
        y0 = ys[k]
        slope = (ys[k + 1] - y0) / (xs[k + 1] - xs[k])
        disc = np.maximum(y0 * y0 + 2.0 * slope * rest, 0.0)
        # stable root of slope/2 u^2 + y0 u - rest = 0
        denom = y0 + np.sqrt(disc)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = np.where(denom > 0, 2.0 * rest / denom, 0.0)
        return np.clip(xs[k] + step, xs[k], xs[k + 1])

    def _sample(self, rng, size):
        return self.ppf(rng.random(size))

    def mean(self):
        xs, ys = self._x, self._y
        x0, x1, y0, y1 = xs[:-1], xs[1:], ys[:-1], ys[1:]
        # exact first moment of each trapezoid
        h = x1 - x0
        return float(np.sum(h / 6.0 * (y0 * (2 * x0 + x1) + y1 * (x0 + 2 * x1))))

    def var(self):
        xs, ys = self._x, self._y
        x0, x1, y0, y1 = xs[:-1], xs[1:], ys[:-1], ys[1:]
        h = x1 - x0
        second = np.sum(
            h / 12.0
            * (y0 * (3 * x0 * x0 + 2 * x0 * x1 + x1 * x1) + y1 * (x0 * x0 + 2 * x0 * x1 + 3 * x1 * x1))
        )
        return float(second - self.mean() ** 2)

    def shifted(self, offset):
        return PiecewiseLinearDist(tuple((x + offset, y) for x, y in self.knots))

    def to_record(self):
        return {"kind": "pwl", "knots": [[x, y] for x, y in self.knots]}


def density(dist: BoundedDistribution, x):
    return dist.pdf(x)


def cumulative(dist: BoundedDistribution, x):
    return dist.cdf(x)


def sample(dist: BoundedDistribution, rng: np.random.Generator, size=None):
    return dist.sample(rng, size)


def support(dist: BoundedDistribution) -> tuple[float, float]:
    return dist.support()


_RECORD_KEYS = {
    "triangular": {"kind", "min", "mode", "max"},
    "pert": {"kind", "min", "mode", "max", "lambda"},
    "pwl": {"kind", "knots"},
}


def from_record(record: Mapping[str, Any], path: str = "distribution") -> BoundedDistribution:
    """Build a distribution from its tagged JSON record."""
    if not isinstance(record, Mapping):
        raise DistributionError(f"{path}: expected an object")
    kind = record.get("kind")
    if kind not in _RECORD_KEYS:
        raise DistributionError(f"{path}.kind: unknown distribution kind {kind!r}")
    unknown = set(record) - _RECORD_KEYS[kind]
    if unknown:
        raise DistributionError(f"{path}: unknown keys {sorted(unknown)}")
    try:
        if kind == "pwl":
            return PiecewiseLinearDist(tuple(tuple(k) for k in record["knots"]))
        args = (float(record["min"]), float(record["mode"]), float(record["max"]))
        if kind == "triangular":
            return TriangularDist(*args)
        return PertDist(*args, lam=float(record.get("lambda", DEFAULT_LAMBDA)))
    except KeyError as exc:
        raise DistributionError(f"{path}.{exc.args[0]}: missing field") from None
    except (TypeError, DistributionError) as exc:
        raise DistributionError(f"{path}: {exc}") from None
