import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from probcong import scenario as S
from probcong.congestion import occupancy_at, overload_probability
from probcong.dist import TriangularDist
from probcong.flightmodel import Crossing, FlightPlan, IntentModel, propagate_marginals, sample_trajectories
from probcong.mc import (
    EventList,
    MeanAccumulator,
    ParticleStore,
    StoppingRule,
    TrajectorySampler,
    congested_intervals,
    congestion_cost_sampling,
    congestion_monitoring,
    expected_congestion_cost_mc,
    expected_delay_cost_mc,
    run_until_stopped,
    sector_flights,
    sweep_cost,
    sweep_costs,
)


def two_flight_scenario(offset=240.0, support=180.0, capacity=1):
    intent = IntentModel("triangular", support)
    inbound = TriangularDist(0.0, 30.0, 240.0)
    flights = tuple(
        FlightPlan(f"F{k}", ("a", "b", "c"), (400.0, 600.0), (Crossing("S", 1, 2),),
                   1000.0 + k * offset + 1000.0, (0.0, 9000.0), inbound)
        for k in range(2)
    )
    return S.Scenario(S.Airspace((S.Sector("S", capacity),), (0.0, 5000.0)), flights, intent)


def deterministic_single():
    return S.gen_corridor(n_sectors=1, takeoff=(600, 600), target_arrival=1200, support=0.0,
                          inbound=TriangularDist(0, 0, 0), capacity=0)


# --- accumulator ------------------------------------------------------------


def test_accumulator_matches_two_pass(rng):
    x = rng.lognormal(3.0, 1.0, 10**6)
    acc = MeanAccumulator()
    for chunk in np.array_split(x, 37):
        for v in chunk[:5]:
            acc.add(v)
        acc.add_many(chunk[5:])
    assert acc.n == x.size
    assert acc.mean == pytest.approx(x.mean(), rel=1e-12)
    sem = x.std(ddof=1) / math.sqrt(x.size)
    assert acc.sem == pytest.approx(sem, rel=1e-12)


def test_accumulator_merge_equals_concatenation(rng):
    a, b = rng.normal(size=1000), rng.normal(5, 2, size=300)
    left, right, whole = MeanAccumulator(), MeanAccumulator(), MeanAccumulator()
    left.add_many(a)
    right.add_many(b)
    whole.add_many(np.concatenate([a, b]))
    left.merge(right)
    assert left.n == whole.n
    assert abs(left.mean - whole.mean) < 1e-12
    assert abs(left.m2 - whole.m2) < 1e-12 * whole.m2


def test_sem_undefined_below_two():
    acc = MeanAccumulator()
    acc.add(1.0)
    assert math.isnan(acc.sem)


# --- sweep ------------------------------------------------------------------


def test_sweep_examples():
    assert sweep_cost([(0, 10), (5, 15)], 1) == 5
    assert sweep_cost([(0, 30), (10, 20), (12, 18)], 1) == 28
    assert sweep_cost([(0, 10), (10, 20)], 1) == 0
    assert sweep_cost([(0, 10), (20, 30)], 0) == 20


def test_event_list_invariants(rng):
    lo = rng.uniform(0, 100, 40)
    iv = list(zip(lo, lo + rng.uniform(0, 30, 40)))
    iv += [(50.0, 60.0), (60.0, 70.0)]
    ev = EventList.from_intervals(iv)
    assert np.all(np.diff(ev.times) >= 0)
    c = ev.counts()
    assert np.all(c >= 0) and c[-1] == 0
    ties = np.flatnonzero(np.diff(ev.times) == 0)
    for j in ties:
        assert ev.deltas[j] <= ev.deltas[j + 1]


def test_sweep_permutation_invariant(rng):
    lo = rng.uniform(0, 100, 12)
    iv = list(zip(lo, lo + rng.uniform(0, 50, 12)))
    ref = sweep_cost(iv, 2)
    for _ in range(5):
        perm = [iv[i] for i in rng.permutation(len(iv))]
        assert sweep_cost(perm, 2) == pytest.approx(ref, rel=1e-12)


def test_vectorised_sweep_matches_scalar(rng):
    entry = np.round(rng.uniform(0, 100, (200, 6)))
    exit_ = entry + np.round(rng.uniform(0, 60, (200, 6)))
    for cap in (0, 1, 3):
        vec = sweep_costs(entry, exit_, cap)
        ref = [sweep_cost(list(zip(e, x)), cap) for e, x in zip(entry, exit_)]
        assert np.allclose(vec, ref, rtol=1e-12, atol=1e-9)


def test_congested_intervals_are_maximal():
    entry = np.array([[0.0, 10.0, 12.0], [0.0, 50.0, 70.0]])
    exit_ = np.array([[30.0, 20.0, 18.0], [10.0, 60.0, 80.0]])
    rows, lo, hi = congested_intervals(entry, exit_, 1)
    assert list(rows) == [0]
    assert (lo[0], hi[0]) == (10.0, 20.0)


# --- particle store ---------------------------------------------------------


def test_store_deterministic_across_threads():
    sc = S.gen_grid(rows=3, cols=3, n_flights=12, horizon=4000)
    ids = [f.id for f in sc.flights]
    a = ParticleStore(sc, None, seed=9, block_size=64)
    ref = {fid: a.trajectories(fid, 0, 640) for fid in ids}
    b = ParticleStore(sc, None, seed=9, block_size=64)
    jobs = [(fid, blk) for fid in reversed(ids) for blk in range(10)]
    np.random.default_rng(0).shuffle(jobs)
    with ThreadPoolExecutor(8) as pool:
        list(pool.map(lambda j: b.block(*j), jobs))
    for fid in ids:
        assert np.array_equal(b.trajectories(fid, 0, 640), ref[fid])
    assert not np.array_equal(ref[ids[0]], ParticleStore(sc, None, seed=10).trajectories(ids[0], 0, 640))


def test_store_lru_regenerates_identically():
    sc = two_flight_scenario()
    store = ParticleStore(sc, None, seed=1, block_size=16, max_blocks=2)
    first = store.trajectory(5, "F0").times
    for b in range(6):
        store.block("F1", b)
    assert np.array_equal(store.trajectory(5, "F0").times, first)


def test_common_random_numbers():
    sc = S.gen_grid(rows=3, cols=3, n_flights=24, horizon=4000)
    store = ParticleStore(sc, None, seed=3)
    shared = None
    for f in sc.flights:
        secs = [c.sector for c in f.crossings]
        if len(secs) >= 2:
            shared = (f, secs[0], secs[1])
            break
    f, s1, s2 = shared
    e1, _ = store.sector_intervals([(f.id, f.crossing_for(s1))], 0, 100)
    _, x2 = store.sector_intervals([(f.id, f.crossing_for(s2))], 0, 100)
    tr = store.trajectories(f.id, 0, 100)
    assert np.array_equal(e1[:, 0], tr[:, f.crossing_for(s1).entry_idx])
    assert np.array_equal(x2[:, 0], tr[:, f.crossing_for(s2).exit_idx])


def test_single_particle_cost_matches_batch():
    sc = two_flight_scenario()
    store = ParticleStore(sc, None, seed=4)
    fl = sector_flights(sc, "S")
    entry, exit_ = store.sector_intervals(fl, 0, 20)
    batch = sweep_costs(entry, exit_, 1)
    for p in range(20):
        assert congestion_cost_sampling("S", p, fl, 1, store) == pytest.approx(batch[p], abs=1e-9)


# --- stopping ---------------------------------------------------------------


def test_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule(eps_rel=0)
    with pytest.raises(ValueError):
        StoppingRule(n_init=1)


def test_deterministic_stops_at_n_init():
    r = run_until_stopped(lambda s, n: np.full(n, 4.0), StoppingRule(n_init=30))
    assert (r.n_used, r.sem, r.stop, r.converged) == (30, 0.0, "rel", True)


def test_zero_cost_stops_by_absolute_threshold():
    sc = two_flight_scenario(capacity=2)
    r = expected_congestion_cost_mc("S", sector_flights(sc, "S"), 2, StoppingRule(),
                                    ParticleStore(sc, None, seed=0))
    assert (r.mean, r.stop, r.n_used) == (0.0, "abs", 30)


def test_n_max_flags_non_convergence(rng):
    rule = StoppingRule(eps_rel=1e-6, n_init=10, n_max=500)
    r = run_until_stopped(lambda s, n: rng.normal(1.0, 1.0, n), rule)
    assert not r.converged and r.stop == "max" and r.n_used == 500


def test_stop_count_independent_of_batching(rng):
    xs = np.random.default_rng(2).exponential(size=10**5)
    rule = StoppingRule(eps_rel=0.01, n_init=30)
    r = run_until_stopped(lambda s, n: xs[s : s + n], rule)
    acc = MeanAccumulator()
    for k, v in enumerate(xs):
        acc.add(v)
        if acc.n >= 30 and acc.sem <= 0.01 * acc.mean:
            break
    assert r.n_used == acc.n
    assert r.mean == pytest.approx(acc.mean, rel=1e-12)


def test_literal_flag_stops_on_large_sem(rng):
    draw = lambda s, n: rng.normal(0.0, 100.0, n)
    lit = run_until_stopped(draw, StoppingRule(eps_rel=1e-3, eps_abs=0.1, literal=True))
    assert lit.stop == "abs" and lit.n_used == 30
    default = run_until_stopped(draw, StoppingRule(eps_rel=1e-3, eps_abs=0.1, n_max=2000))
    assert default.stop == "max"


def test_iid_slope(rng):
    marks = [2**k for k in range(10, 18)]
    rule = StoppingRule(eps_rel=1e-9, n_init=30, n_max=2**17)
    r = run_until_stopped(lambda s, n: rng.gamma(2.0, 3.0, n), rule, marks)
    n, _, sem = np.array(r.trace).T
    slope = np.polyfit(np.log(n), np.log(sem), 1)[0]
    assert -0.6 <= slope <= -0.4


def test_delay_mc_unreachable_arrival(rng):
    sc = S.gen_corridor()
    f = sc.flights[0]
    r = expected_delay_cost_mc(f, f.nominal_targets(), 1e6, StoppingRule(), rng, sc.intent)
    assert r.mean == 0.0 and r.stop == "abs"


def test_sampler_cost_pert_above_triangular():
    import time

    costs = {}
    for family in ("triangular", "pert"):
        sc = S.gen_corridor(family=family)
        f = sc.flights[0]
        s = TrajectorySampler(f, f.nominal_targets(), sc.intent)
        s.sample(np.random.default_rng(0), 10)
        best = math.inf
        for _ in range(3):
            t0 = time.perf_counter()
            s.sample(np.random.default_rng(0), 2 * 10**5)
            best = min(best, time.perf_counter() - t0)
        costs[family] = best
    assert costs["pert"] > 2 * costs["triangular"]


def test_compiled_sampler_matches_reference_law():
    sc = S.gen_corridor(family="pert")
    f = sc.flights[0]
    g = f.nominal_targets()
    a = TrajectorySampler(f, g, sc.intent).sample(np.random.default_rng(1), 10**5)
    b = sample_trajectories(f, g, sc.intent, np.random.default_rng(2), 10**5)
    d = a[:, -1] - a[:, 0], b[:, -1] - b[:, 0]
    se = math.sqrt(d[0].var() / d[0].size + d[1].var() / d[1].size)
    assert abs(d[0].mean() - d[1].mean()) < 4 * se


# --- monitoring -------------------------------------------------------------


def test_monitor_deterministic_two_keys():
    sc = deterministic_single()
    m = congestion_monitoring("S0", sector_flights(sc, "S0"), 0, 1.0, 0.01,
                              ParticleStore(sc, None, seed=0))
    assert list(m.keys) == [600.0, 1200.0]
    assert list(m.probability) == [1.0, 1.0]
    assert m.max_sem() == 0.0 and m.converged


def test_monitor_empty_when_never_congested():
    sc = two_flight_scenario(capacity=2)
    m = congestion_monitoring("S", sector_flights(sc, "S"), 2, 1.0, 0.01,
                              ParticleStore(sc, None, seed=0))
    assert len(m) == 0 and m.n_particles == 30


def test_monitor_midpoint_matches_overload_probability():
    # second flight enters around the time the first leaves
    sc = two_flight_scenario(offset=560.0)
    f0, f1 = sc.flights
    marg = {f.id: propagate_marginals(f, f.nominal_targets(), sc.intent, 1.0) for f in sc.flights}
    mid = 0.5 * (marg["F1"][1].mean() + marg["F0"][2].mean())
    q = overload_probability(
        occupancy_at("S", [(f.id, marg[f.id], f.crossings[0]) for f in sc.flights], mid), 1)
    assert 0.05 < q < 0.95
    m = congestion_monitoring("S", sector_flights(sc, "S"), 1, 1.0, 0.005,
                              ParticleStore(sc, None, seed=8), probes=[mid])
    p, sem = m.at(mid)
    assert abs(p - q) <= 3 * sem


def test_monitor_keys_spaced_and_counts_full():
    sc = two_flight_scenario()
    eps = 5.0
    m = congestion_monitoring("S", sector_flights(sc, "S"), 1, eps, 0.02,
                              ParticleStore(sc, None, seed=2))
    assert np.all(np.diff(m.keys) >= eps)
    assert np.all(m.counts == m.n_particles)


def test_monitor_backfill_matches_brute_force():
    sc = two_flight_scenario()
    fl = sector_flights(sc, "S")
    store = ParticleStore(sc, None, seed=6)
    m = congestion_monitoring("S", fl, 1, 2.0, 1e-9, store, n_init=30, n_max=300)
    entry, exit_ = store.sector_intervals(fl, 0, m.n_particles)
    rows, lo, hi = congested_intervals(entry, exit_, 1)
    for k, t in enumerate(m.keys):
        inside = (lo <= t) & (t <= hi)
        assert m.hits[k] == np.unique(rows[inside]).size
    assert m.n_particles == 300 and not m.converged


def test_monitor_rejects_bad_radius():
    sc = deterministic_single()
    with pytest.raises(ValueError):
        congestion_monitoring("S0", sector_flights(sc, "S0"), 0, 0.0, 0.01,
                              ParticleStore(sc, None, seed=0))
