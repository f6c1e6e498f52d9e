import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from probcong import scenario as S
from probcong.congestion import (
    OccupancyDistribution,
    excess_moment,
    occupancy_at,
    overload_probability,
    pb_pmf_dft,
    pb_pmf_dp,
    pb_pmf_dp_batch,
    presence_matrix,
    presence_vector,
)
from probcong.costs import scenario_marginals
from probcong.flightmodel import MarginalCurve, sample_trajectories


def point_flight(entry, exit_):
    return [MarginalCurve.point_mass(entry, 1.0), MarginalCurve.point_mass(exit_, 1.0)], (0, 1)


# --- examples ---------------------------------------------------------------


def test_dft_examples():
    assert np.allclose(pb_pmf_dft([1, 1, 1]).pmf, [0, 0, 0, 1], atol=1e-15)
    assert np.allclose(pb_pmf_dft([0.5, 0.5]).pmf, [0.25, 0.5, 0.25], atol=1e-15)


def test_dp_examples():
    assert list(pb_pmf_dp([]).pmf) == [1.0]
    assert np.allclose(pb_pmf_dp([0.3]).pmf, [0.7, 0.3])
    assert pb_pmf_dp([0.1, 0.2, 0.3]).mean() == pytest.approx(0.6, abs=1e-12)


def test_dft_matches_dp_small(rng):
    for _ in range(20):
        p = rng.uniform(size=rng.integers(0, 16))
        assert np.max(np.abs(pb_pmf_dft(p).pmf - pb_pmf_dp(p).pmf)) < 1e-10


def test_dft_matches_dp_up_to_64(rng):
    for n in (30, 50, 64):
        p = rng.uniform(size=n)
        assert np.max(np.abs(pb_pmf_dft(p).pmf - pb_pmf_dp(p).pmf)) < 1e-10


def test_invalid_probs():
    for bad in ([1.2], [-0.1], [np.nan]):
        with pytest.raises(ValueError):
            pb_pmf_dft(bad)
        with pytest.raises(ValueError):
            pb_pmf_dp(bad)


def test_overload_examples():
    occ = OccupancyDistribution(np.array([0.25, 0.5, 0.25]))
    assert overload_probability(occ, 1) == 0.25
    assert overload_probability(occ, 2) == 0.0
    assert overload_probability(occ, 7) == 0.0
    oracle = stats.binom.sf(2, 5, 0.3)
    assert overload_probability(pb_pmf_dft([0.3] * 5), 2) == pytest.approx(oracle, abs=1e-9)
    assert oracle == pytest.approx(0.16308, abs=1e-9)


def test_occupancy_outside_and_deterministic():
    m, c = point_flight(100.0, 200.0)
    flights = [("A", m, c)]
    assert list(occupancy_at("S", flights, 50.0).pmf) == [1.0]
    assert list(occupancy_at("S", flights, 250.0).pmf) == [1.0]
    assert list(occupancy_at("S", flights, 150.0).pmf) == [0.0, 1.0]


def test_presence_vector_drops_absent():
    a = point_flight(100.0, 200.0)
    b = point_flight(300.0, 400.0)
    pv = presence_vector("S", [("A", *a), ("B", *b)], 150.0)
    assert pv.flights == ("A",)
    assert np.all((pv.probs > 0) & (pv.probs <= 1))


def test_occupancy_dp_and_dft_paths_agree(rng):
    # 80 stochastic flights force the transform path
    flights = []
    for k in range(80):
        lo = rng.uniform(0, 50)
        entry = MarginalCurve(lo, 1.0, np.array([0.0, 1.0, 0.0]))
        exit_ = MarginalCurve(lo + 100, 1.0, np.array([0.0, 1.0, 0.0]))
        flights.append((f"F{k}", [entry, exit_], (0, 1)))
    occ = occupancy_at("S", flights, 60.0)
    pv = presence_vector("S", flights, 60.0)
    assert pv.probs.size > 64
    assert np.max(np.abs(occ.pmf - pb_pmf_dp(pv.probs).pmf)) < 1e-10


# --- invariants -------------------------------------------------------------


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), max_size=40))
def test_mean_and_variance_identity(p):
    occ = pb_pmf_dft(p)
    p = np.asarray(p)
    assert occ.pmf.sum() == pytest.approx(1.0, abs=1e-9)
    assert occ.mean() == pytest.approx(p.sum(), abs=1e-9)
    assert occ.var() == pytest.approx(np.sum(p * (1 - p)), abs=1e-9)


def test_permutation_invariance(rng):
    p = rng.uniform(size=20)
    a = pb_pmf_dft(p).pmf
    b = pb_pmf_dft(rng.permutation(p)).pmf
    assert np.max(np.abs(a - b)) < 1e-12


def test_overload_monotone_in_capacity(rng):
    occ = pb_pmf_dp(rng.uniform(size=12))
    vals = [overload_probability(occ, c) for c in range(15)]
    assert np.all(np.diff(vals) <= 1e-15)


def test_batch_dp_matches_scalar(rng):
    p = rng.uniform(size=(7, 9))
    batch = pb_pmf_dp_batch(p)
    for row, q in zip(batch, p):
        assert np.allclose(row, pb_pmf_dp(q).pmf, atol=1e-15)


def test_excess_moment():
    pmf = np.array([0.1, 0.2, 0.3, 0.4])
    assert excess_moment(pmf, 1) == pytest.approx(0.3 * 1 + 0.4 * 4)
    assert excess_moment(pmf, 3) == 0.0


def test_presence_matrix_threshold():
    m, c = point_flight(100.0, 200.0)
    p = presence_matrix([(m, c)], [50.0, 150.0])
    assert p.shape == (2, 1) and list(p[:, 0]) == [0.0, 1.0]


# --- against sampling -------------------------------------------------------


def test_grid_overload_matches_sampling():
    sc = S.gen_grid(rows=3, cols=3, n_flights=24, horizon=4000)
    sector = max(sc.airspace.sectors, key=lambda s: len(sc.sector_flights(s.id)) - s.capacity)
    fl = sc.sector_flights(sector.id)
    marg = scenario_marginals(sc, flights=fl)
    inputs = [(f.id, marg[f.id], f.crossing_for(sector.id)) for f in fl]
    ts = np.linspace(0, sc.airspace.horizon[1], 801)
    probs = [overload_probability(occupancy_at(sector.id, inputs, t), sector.capacity) for t in ts]
    t_star = ts[int(np.argmax(probs))]
    q = max(probs)
    assert q > 0.05

    rng = np.random.default_rng(11)
    n = 20000
    count = np.zeros(n, dtype=int)
    for f in fl:
        x = sample_trajectories(f, f.nominal_targets(), sc.intent, rng, n)
        c = f.crossing_for(sector.id)
        count += (x[:, c.entry_idx] <= t_star) & (x[:, c.exit_idx] > t_star)
    hits = count > sector.capacity
    sem = math.sqrt(q * (1 - q) / n)
    assert abs(hits.mean() - q) <= 3 * sem
