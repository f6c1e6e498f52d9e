"""Command-line front end: cost tables, monitoring maps and convergence traces as CSV."""
from __future__ import annotations

import argparse
import csv
import io
import math
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mc
from .costs import expected_congestion_cost, expected_delay_cost, scenario_marginals, sector_inputs
from .flightmodel import ConfigurationError, propagate_marginals
from .quad import QuadratureError
from .scenario import (
    DecisionVector,
    Scenario,
    ScenarioError,
    gen_corridor,
    gen_grid,
    load,
    load_decision,
    sample_decision_vector,
    save,
    save_decision,
)

EXIT_OK = 0
EXIT_SCHEMA = 2
EXIT_NONCONVERGED = 3


@dataclass(frozen=True)
class RunConfig:
    scenario: Path
    method: str = "quadrature"
    step: float = 1.0
    eps_rel: float = 0.01
    eps_abs: float = 0.1
    n_init: int = mc.DEFAULT_N_INIT
    n_max: int = mc.DEFAULT_N_MAX
    merge_eps: float = 1.0
    seed: int | None = None
    out: Path | None = None
    gamma_file: Path | None = None
    sweep: int = 0
    literal: bool = False
    timing: bool = False

    def __post_init__(self):
        if self.method not in ("quadrature", "mc", "both"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method != "quadrature" and self.seed is None:
            raise ValueError("--seed is required for Monte-Carlo runs")
        if self.sweep and self.seed is None:
            raise ValueError("--seed is required with --sweep")

    @property
    def rule(self) -> mc.StoppingRule:
        return mc.StoppingRule(self.eps_rel, self.eps_abs, self.n_init, self.n_max, self.literal)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def _write_csv(rows: Sequence[Sequence], header: Sequence[str], out: Path | None) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in r])
    if out is None:
        sys.stdout.write(buf.getvalue())
    else:
        Path(out).write_text(buf.getvalue(), encoding="utf-8")


def _run_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1)[0])


def decision_vectors(cfg: RunConfig, scenario: Scenario) -> list[DecisionVector]:
    """Run 0 uses the gamma file or nominal targets; ``--sweep N`` draws N uniform vectors."""
    if cfg.sweep:
        rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(0x6A,)))
        return [sample_decision_vector(scenario, rng) for _ in range(cfg.sweep)]
    gamma = scenario.nominal_decision()
    if cfg.gamma_file is not None:
        gamma.update(load_decision(cfg.gamma_file))
    scenario.check_decision(gamma)
    return [gamma]


class _Clock:
    def __init__(self, enabled: bool):
        self.enabled = enabled

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.ms = (time.perf_counter() - self.t0) * 1e3 if self.enabled else None


def _mc_status(r: mc.MCResult) -> str:
    return {"rel": "rel-stop", "abs": "abs-stop", "max": "non-converged"}[r.stop]


def _disagreement(q, m) -> float | None:
    if q is None or m is None:
        return None
    return abs(q - m) / abs(m) if m != 0 else (0.0 if q == 0 else math.inf)


def cmd_delay_cost(cfg: RunConfig) -> int:
    scenario = load(cfg.scenario)
    rows, bad = [], False
    for run, gamma in enumerate(decision_vectors(cfg, scenario)):
        for f in scenario.flights:
            q = m = None
            if cfg.method in ("quadrature", "both"):
                with _Clock(cfg.timing) as clk:
                    try:
                        curves = propagate_marginals(f, gamma[f.id], scenario.intent, cfg.step)
                        rep = expected_delay_cost(curves[-1], f.scheduled_arrival)
                        status = "ok"
                    except QuadratureError:
                        rep, status, bad = None, "quad-error", True
                q = rep.value if rep else None
                rows.append([run, f.id, "quadrature", q, rep.error_estimate if rep else None,
                             None, clk.ms, status, None])
            if cfg.method in ("mc", "both"):
                rng = np.random.default_rng(
                    np.random.SeedSequence(cfg.seed, spawn_key=(run, mc.flight_key(f.id))))
                with _Clock(cfg.timing) as clk:
                    r = mc.expected_delay_cost_mc(f, gamma[f.id], f.scheduled_arrival, cfg.rule, rng,
                                                  scenario.intent)
                bad |= not r.converged
                m = r.mean
                rows.append([run, f.id, "mc", r.mean, r.sem, r.n_used, clk.ms, _mc_status(r), None])
            if cfg.method == "both":
                rows[-1][-1] = _disagreement(q, m)
    _write_csv(rows, ["run", "flight_id", "method", "value", "error", "n_samples", "wall_ms",
                      "status", "rel_disagreement"], cfg.out)
    return EXIT_NONCONVERGED if bad else EXIT_OK


def cmd_congestion_cost(cfg: RunConfig) -> int:
    scenario = load(cfg.scenario)
    horizon = scenario.airspace.cost_horizon
    sectors = sorted(scenario.airspace.sectors, key=lambda s: s.id)
    rows, bad = [], False
    for run, gamma in enumerate(decision_vectors(cfg, scenario)):
        if cfg.method in ("quadrature", "both"):
            marg = scenario_marginals(scenario, gamma, cfg.step)
        if cfg.method in ("mc", "both"):
            store = mc.ParticleStore(scenario, gamma, _run_seed(cfg.seed, run))
        for s in sectors:
            q = m = None
            if cfg.method in ("quadrature", "both"):
                with _Clock(cfg.timing) as clk:
                    try:
                        rep = expected_congestion_cost(s.id, sector_inputs(scenario, marg, s.id),
                                                       s.capacity, horizon)
                        status = "ok"
                    except QuadratureError:
                        rep, status, bad = None, "quad-error", True
                q = rep.value if rep else None
                rows.append([run, s.id, "quadrature", q, rep.error_estimate if rep else None, None,
                             clk.ms, status, None])
            if cfg.method in ("mc", "both"):
                with _Clock(cfg.timing) as clk:
                    r = mc.expected_congestion_cost_mc(s.id, mc.sector_flights(scenario, s.id),
                                                       s.capacity, cfg.rule, store, horizon)
                bad |= not r.converged
                m = r.mean
                rows.append([run, s.id, "mc", r.mean, r.sem, r.n_used, clk.ms, _mc_status(r), None])
            if cfg.method == "both":
                rows[-1][-1] = _disagreement(q, m)
    _write_csv(rows, ["run", "sector_id", "method", "value", "error", "n_samples", "wall_ms",
                      "status", "rel_disagreement"], cfg.out)
    return EXIT_NONCONVERGED if bad else EXIT_OK


def run_monitor(scenario: Scenario, gamma: DecisionVector, cfg: RunConfig,
                sectors: Sequence[str] | None = None) -> dict[str, mc.MonitorMap]:
    store = mc.ParticleStore(scenario, gamma, cfg.seed)
    horizon = scenario.airspace.cost_horizon
    ids = sorted(sectors if sectors is not None else (s.id for s in scenario.airspace.sectors))
    out = {}
    for sid in ids:
        out[sid] = mc.congestion_monitoring(
            sid, mc.sector_flights(scenario, sid), scenario.airspace.capacity(sid), cfg.merge_eps,
            cfg.eps_rel, store, cfg.n_init, cfg.n_max, horizon)
    return out


def cmd_monitor(cfg: RunConfig) -> int:
    scenario = load(cfg.scenario)
    gamma = decision_vectors(cfg, scenario)[0]
    maps = run_monitor(scenario, gamma, cfg)
    rows = []
    for sid, m in maps.items():
        for t, p, e in zip(m.keys, m.probability, m.sem):
            rows.append([sid, float(t), float(p), float(e)])
    _write_csv(rows, ["sector_id", "time", "probability", "sem"], cfg.out)
    return EXIT_OK if all(m.converged for m in maps.values()) else EXIT_NONCONVERGED


def geometric_checkpoints(n_max: int, ratio: int = 2) -> list[int]:
    out, n = [], 2
    while n <= n_max:
        out.append(n)
        n *= ratio
    return out


def fit_slope(ns, sems, n_min: float = 1e3) -> float:
    """Least-squares slope of log SEM against log n over ``n >= n_min``."""
    ns, sems = np.asarray(ns, dtype=float), np.asarray(sems, dtype=float)
    keep = (ns >= n_min) & (sems > 0)
    if keep.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(ns[keep]), np.log(sems[keep]), 1)[0])


def cmd_convergence(cfg: RunConfig, kind: str = "delay", target: str | None = None) -> int:
    """Accumulator state at n = 2, 4, 8, ... for each run (one per decision vector)."""
    scenario = load(cfg.scenario)
    marks = geometric_checkpoints(cfg.n_max)
    rows, bad = [], False
    for run, gamma in enumerate(decision_vectors(cfg, scenario)):
        if kind == "delay":
            f = scenario.flight(target) if target else scenario.flights[0]
            rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(run, mc.flight_key(f.id))))
            r = mc.expected_delay_cost_mc(f, gamma[f.id], f.scheduled_arrival, cfg.rule, rng,
                                          scenario.intent, checkpoints=marks)
        else:
            sid = target or max(scenario.airspace.sectors,
                                key=lambda s: (len(scenario.sector_flights(s.id)), s.id)).id
            store = mc.ParticleStore(scenario, gamma, _run_seed(cfg.seed, run))
            r = mc.expected_congestion_cost_mc(sid, mc.sector_flights(scenario, sid),
                                               scenario.airspace.capacity(sid), cfg.rule, store,
                                               scenario.airspace.cost_horizon, checkpoints=marks)
        bad |= not r.converged
        for n, mean, sem in r.trace:
            rows.append([run, n, mean, sem])
    _write_csv(rows, ["run", "n", "mean", "sem"], cfg.out)
    # running out of budget is the expected end of a fixed-budget trace
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--scenario", required=True, type=Path)
    if method:
        p.add_argument("--method", choices=["quadrature", "mc", "both"], default="quadrature")
        p.add_argument("--step", type=float, default=1.0, help="quadrature grid step (s)")
    p.add_argument("--eps-rel", type=float, default=0.01)
    p.add_argument("--eps-abs", type=float, default=0.1)
    p.add_argument("--n-init", type=int, default=mc.DEFAULT_N_INIT)
    p.add_argument("--n-max", type=int, default=mc.DEFAULT_N_MAX)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    p.add_argument("--gamma-file", type=Path)
    p.add_argument("--sweep", type=int, default=0, help="number of random decision vectors")
    p.add_argument("--literal-stop", action="store_true",
                   help="use the literal while-condition of the SEM stopping loop")
    p.add_argument("--timing", action="store_true", help="fill the wall_ms column")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="probcong", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    _add_common(sub.add_parser("delay-cost", help="expected delay cost per flight"))
    _add_common(sub.add_parser("congestion-cost", help="expected congestion cost per sector"))
    p = sub.add_parser("monitor", help="congestion probability over time per sector")
    _add_common(p, method=False)
    p.add_argument("--merge-eps", type=float, default=1.0)
    p = sub.add_parser("convergence", help="Monte-Carlo accumulator trace")
    _add_common(p, method=False)
    p.add_argument("--kind", choices=["delay", "congestion"], default="delay")
    p.add_argument("--target", help="flight id (delay) or sector id (congestion)")
    p.set_defaults(n_max=1 << 17)

    p = sub.add_parser("gen-corridor", help="write the single-flight corridor scenario")
    p.add_argument("--n-sectors", type=int, default=11)
    p.add_argument("--family", choices=["triangular", "pert"], default="triangular")
    p.add_argument("--capacity", type=int, default=1)
    p.add_argument("--out", type=Path, required=True)
    p = sub.add_parser("gen-grid", help="write the grid scenario")
    p.add_argument("--rows", type=int, default=11)
    p.add_argument("--cols", type=int, default=11)
    p.add_argument("--n-flights", type=int, default=192)
    p.add_argument("--horizon", type=float, default=9000.0)
    p.add_argument("--family", choices=["triangular", "pert"], default="triangular")
    p.add_argument("--out", type=Path, required=True)
    p = sub.add_parser("sample-gamma", help="write a uniform random feasible decision vector")
    p.add_argument("--scenario", required=True, type=Path)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _config(args) -> RunConfig:
    return RunConfig(
        scenario=args.scenario,
        method=getattr(args, "method", "mc"),
        step=getattr(args, "step", 1.0),
        eps_rel=args.eps_rel,
        eps_abs=args.eps_abs,
        n_init=args.n_init,
        n_max=args.n_max,
        merge_eps=getattr(args, "merge_eps", 1.0),
        seed=args.seed,
        out=args.out,
        gamma_file=args.gamma_file,
        sweep=args.sweep,
        literal=args.literal_stop,
        timing=args.timing,
    )


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "gen-corridor":
            save(gen_corridor(n_sectors=args.n_sectors, family=args.family, capacity=args.capacity), args.out)
            return EXIT_OK
        if args.command == "gen-grid":
            save(gen_grid(args.rows, args.cols, args.n_flights, args.horizon, family=args.family), args.out)
            return EXIT_OK
        if args.command == "sample-gamma":
            sc = load(args.scenario)
            save_decision(sample_decision_vector(sc, np.random.default_rng(args.seed)), args.out)
            return EXIT_OK
        cfg = _config(args)
        if args.command == "delay-cost":
            return cmd_delay_cost(cfg)
        if args.command == "congestion-cost":
            return cmd_congestion_cost(cfg)
        if args.command == "monitor":
            return cmd_monitor(cfg)
        return cmd_convergence(cfg, args.kind, args.target)
    except (ScenarioError, ConfigurationError, ValueError, KeyError, OSError) as exc:
        print(f"probcong: {exc}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
