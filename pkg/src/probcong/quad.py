"""Adaptive Chebyshev quadrature.

Integrals are estimated with a nested pair of Fejer rules of the second kind,
i.e. the Clenshaw-Curtis construction restricted to interior Chebyshev nodes.
Interior nodes matter here: integrands are routinely discontinuous at the
breakpoints handed to :func:`integrate_piecewise`, and a closed rule would
sample the wrong side of the jump.

Refinement is done on many intervals at once (:func:`integrate_cells`), which
is what makes per-grid-node marginal propagation affordable in numpy.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np

# Rule orders; order n uses the n - 1 interior nodes cos(j pi / n).
LOW_ORDER = 8
HIGH_ORDER = 16
# cheaper pair for very short, nearly polynomial cells
CELL_ORDERS = (4, 8)


class QuadratureError(RuntimeError):
    """Raised when refinement runs out of subdivisions.

    ``value`` and ``error`` carry the best estimate reached.
    """

    def __init__(self, message: str, value, error):
        super().__init__(message)
        self.value = value
        self.error = error


@dataclass(frozen=True)
class QuadratureSpec:
    rel_tol: float = 1e-6
    # None means 1e-9 per unit of interval length
    abs_tol: float | None = None
    max_subdivisions: int = 50

    def __post_init__(self):
        if not (self.rel_tol > 0 or (self.abs_tol is not None and self.abs_tol > 0)):
            raise ValueError("need rel_tol > 0 or abs_tol > 0")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be >= 1")

    def absolute(self, width: float) -> float:
        if self.abs_tol is None:
            return 1e-9 * width
        return self.abs_tol


DEFAULT_SPEC = QuadratureSpec()


@lru_cache(maxsize=None)
def fejer2(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of Fejer's second rule on [-1, 1] (n - 1 points)."""
    theta = np.arange(1, n) * np.pi / n
    k = np.arange(1, n // 2 + 1)
    odd = 2 * k - 1
    sums = np.sin(np.outer(theta, odd)) @ (1.0 / odd)
    weights = 4.0 * np.sin(theta) / n * sums
    nodes = np.cos(theta)
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


@lru_cache(maxsize=None)
def _nested_pair(low: int, high: int):
    x_hi, w_hi = fejer2(high)
    x_lo, w_lo = fejer2(low)
    # the low-order nodes are a subset of the high-order ones
    idx = np.array([int(np.argmin(np.abs(x_hi - x))) for x in x_lo])
    w_lo_full = np.zeros_like(w_hi)
    w_lo_full[idx] = w_lo
    return x_hi, w_hi, w_lo_full


def integrate_cells(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray],
    a,
    b,
    spec: QuadratureSpec = DEFAULT_SPEC,
    *,
    abs_tol=None,
    raise_on_failure: bool = True,
    orders: tuple[int, int] = (LOW_ORDER, HIGH_ORDER),
):
    """Integrate over many intervals ``[a[i], b[i]]`` at once.

    ``f(x, owner)`` is called with a 2-D array of abscissae (one row per
    piece) and an integer column naming the interval each row belongs to. Every interval
    keeps its own set of pieces; an interval is finished once the summed piece
    errors drop below ``max(abs_tol, rel_tol * |value|)``. Otherwise the pieces
    carrying more than their length-share of that budget are bisected (at
    least the worst one, and only the largest-error ones once the budget runs
    short), up to ``spec.max_subdivisions`` pieces.

    Returns ``(values, errors)`` arrays. ``abs_tol`` overrides the spec's
    absolute tolerance per interval (scalar or array); ``orders`` picks the
    nested rule pair.
    """
    a = np.atleast_1d(np.asarray(a, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    ncell = a.size
    width = b - a
    if abs_tol is None:
        abs_cell = 1e-9 * width if spec.abs_tol is None else np.full(ncell, spec.abs_tol)
    else:
        abs_cell = np.broadcast_to(np.asarray(abs_tol, dtype=float), (ncell,)).copy()

    x_ref, w_hi, w_lo = _nested_pair(*orders)
    x_ref = 0.5 * (x_ref + 1.0)
    values = np.zeros(ncell)
    errors = np.zeros(ncell)
    failed = np.zeros(ncell, dtype=bool)

    # cells still being refined; ``slot`` indexes into ``cells``
    cells = np.flatnonzero(width > 0)
    pieces = np.ones(cells.size, dtype=np.int64)
    slot = np.arange(cells.size)
    lo = a[cells]
    hi = b[cells]
    est = np.empty(0)
    err = np.empty(0)
    n_old = 0
    while cells.size:
        # pieces created in the previous round sit at the end
        new_lo, new_hi = lo[n_old:], hi[n_old:]
        span = new_hi - new_lo
        x = new_lo[:, None] + span[:, None] * x_ref[None, :]
        fx = np.broadcast_to(np.asarray(f(x, cells[slot[n_old:], None]), dtype=float), x.shape)
        e_hi = 0.5 * span * (fx @ w_hi)
        est = np.concatenate([est[:n_old], e_hi])
        err = np.concatenate([err[:n_old], np.abs(e_hi - 0.5 * span * (fx @ w_lo))])

        total = np.bincount(slot, est, minlength=cells.size)
        total_err = np.bincount(slot, err, minlength=cells.size)
        tol = np.maximum(abs_cell[cells], spec.rel_tol * np.abs(total))
        ok = total_err <= tol
        exhausted = ~ok & (pieces >= spec.max_subdivisions)
        failed[cells[exhausted]] = True
        finished = ok | exhausted
        values[cells[finished]] = total[finished]
        errors[cells[finished]] = total_err[finished]
        if finished.all():
            break
        if finished.any():
            live = ~finished[slot]
            remap = np.cumsum(~finished) - 1
            slot, lo, hi, est, err = remap[slot[live]], lo[live], hi[live], est[live], err[live]
            cells, pieces, tol = cells[~finished], pieces[~finished], tol[~finished]

        share = tol[slot] * (hi - lo) / width[cells[slot]]
        cand = err > share
        worst = np.zeros(cells.size)
        np.maximum.at(worst, slot, err)
        is_worst = err >= worst[slot]
        has_cand = np.bincount(slot, cand, minlength=cells.size) > 0
        cand |= ~has_cand[slot] & is_worst
        room = spec.max_subdivisions - pieces
        if np.any(np.bincount(slot, cand, minlength=cells.size) > room):
            # short on budget: keep the largest-error candidates that still fit
            idx = np.flatnonzero(cand)
            idx = idx[np.lexsort((-err[idx], slot[idx]))]
            starts = np.searchsorted(slot[idx], np.arange(cells.size))
            rank = np.arange(idx.size) - starts[slot[idx]]
            cand[:] = False
            cand[idx[rank < np.maximum(room[slot[idx]], 1)]] = True
        pieces += np.bincount(slot[cand], minlength=cells.size)

        mid = 0.5 * (lo[cand] + hi[cand])
        stay = ~cand
        n_old = int(stay.sum())
        slot = np.concatenate([slot[stay], np.repeat(slot[cand], 2)])
        lo = np.concatenate([lo[stay], np.column_stack([lo[cand], mid]).ravel()])
        hi = np.concatenate([hi[stay], np.column_stack([mid, hi[cand]]).ravel()])
        est, err = est[stay], err[stay]

    if raise_on_failure and failed.any():
        raise QuadratureError(
            f"{int(failed.sum())} interval(s) did not converge within "
            f"{spec.max_subdivisions} subdivisions",
            values,
            errors,
        )
    return values, errors


def integrate(f: Callable[[np.ndarray], np.ndarray], a: float, b: float,
              spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
    """Integrate a vectorised ``f`` over ``[a, b]``; returns ``(value, error)``."""
    if b < a:
        raise ValueError(f"empty interval [{a}, {b}]")
    try:
        v, e = integrate_cells(lambda x, _: f(x), [a], [b], spec,
                               abs_tol=spec.absolute(b - a))
    except QuadratureError as exc:
        raise QuadratureError(str(exc), float(exc.value[0]), float(exc.error[0])) from None
    return float(v[0]), float(e[0])


def integrate_piecewise(f: Callable[[np.ndarray], np.ndarray], breakpoints,
                        spec: QuadratureSpec = DEFAULT_SPEC) -> tuple[float, float]:
    """Sum of :func:`integrate` over consecutive breakpoint pairs.

    Each sub-interval gets its own subdivision budget; errors are summed.
    """
    pts = np.asarray(breakpoints, dtype=float)
    if pts.size < 2:
        return 0.0, 0.0
    if np.any(np.diff(pts) < 0):
        raise ValueError("breakpoints must be sorted")
    a, b = pts[:-1], pts[1:]
    tol = np.array([spec.absolute(w) for w in b - a])
    try:
        v, e = integrate_cells(lambda x, _: f(x), a, b, spec, abs_tol=tol)
    except QuadratureError as exc:
        raise QuadratureError(str(exc), float(np.sum(exc.value)), float(np.sum(exc.error))) from None
    return float(np.sum(v)), float(np.sum(e))
