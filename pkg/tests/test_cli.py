import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from probcong import scenario as S
from probcong.cli import EXIT_NONCONVERGED, EXIT_OK, EXIT_SCHEMA, fit_slope, main
from probcong.dist import TriangularDist


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


@pytest.fixture
def corridor_file(tmp_path, corridor):
    p = tmp_path / "corridor.json"
    S.save(corridor, p)
    return p


@pytest.fixture
def small_grid_file(tmp_path):
    p = tmp_path / "grid.json"
    S.save(S.gen_grid(rows=3, cols=3, n_flights=12, horizon=4000), p)
    return p


def deterministic_corridor(tmp_path, capacity=1):
    p = tmp_path / "det.json"
    S.save(S.gen_corridor(support=0.0, inbound=TriangularDist(0, 0, 0), capacity=capacity), p)
    return p


# --- exit codes -------------------------------------------------------------


def test_schema_error_exit_code(tmp_path, capsys):
    d = S.to_dict(S.gen_corridor())
    d["sectors"][3]["capacity"] = -1
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    assert main(["delay-cost", "--scenario", str(p)]) == EXIT_SCHEMA
    assert "sectors[3].capacity" in capsys.readouterr().err


def test_missing_file_and_missing_seed(tmp_path, corridor_file):
    assert main(["delay-cost", "--scenario", str(tmp_path / "nope.json")]) == EXIT_SCHEMA
    assert main(["delay-cost", "--scenario", str(corridor_file), "--method", "mc"]) == EXIT_SCHEMA


def test_non_convergence_exit_code(tmp_path, corridor_file):
    out = tmp_path / "o.csv"
    code = main(["delay-cost", "--scenario", str(corridor_file), "--method", "mc", "--seed", "1",
                 "--eps-rel", "1e-9", "--n-max", "200", "--out", str(out)])
    assert code == EXIT_NONCONVERGED
    assert rows(out)[0]["status"] == "non-converged"


def test_module_entry_point(tmp_path):
    out = tmp_path / "c.json"
    r = subprocess.run([sys.executable, "-m", "probcong", "gen-corridor", "--out", str(out)],
                       capture_output=True, text=True)
    assert r.returncode == 0
    assert S.load(out) == S.gen_corridor()


# --- delay cost -------------------------------------------------------------


def test_delay_both_backends_agree(tmp_path, corridor_file):
    out = tmp_path / "d.csv"
    code = main(["delay-cost", "--scenario", str(corridor_file), "--method", "both", "--seed", "4",
                 "--eps-rel", "0.005", "--out", str(out)])
    assert code == EXIT_OK
    r = rows(out)
    assert [x["method"] for x in r] == ["quadrature", "mc"]
    assert float(r[1]["rel_disagreement"]) <= 0.01
    assert r[1]["status"] == "rel-stop"


def test_delay_deterministic_exact(tmp_path):
    p = deterministic_corridor(tmp_path)
    sc = S.load(p)
    g = sc.nominal_decision()
    gfile = tmp_path / "g.json"
    S.save_decision({"F0": g["F0"] + 30.0}, gfile)
    out = tmp_path / "d.csv"
    assert main(["delay-cost", "--scenario", str(p), "--gamma-file", str(gfile), "--out", str(out)]) == 0
    assert float(rows(out)[0]["value"]) == 900.0


def test_sweep_is_reproducible(tmp_path, corridor_file):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["delay-cost", "--scenario", str(corridor_file), "--method", "mc", "--seed", "11",
            "--sweep", "30", "--eps-rel", "0.05"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    r = rows(a)
    assert len(r) == 30 and [int(x["run"]) for x in r] == list(range(30))
    assert all(x["wall_ms"] == "" for x in r)


# --- congestion cost --------------------------------------------------------


def test_congestion_huge_capacity_all_zero(tmp_path):
    d = S.to_dict(S.gen_grid(rows=3, cols=3, n_flights=12, horizon=4000))
    for s in d["sectors"]:
        s["capacity"] = 1000
    p = tmp_path / "g.json"
    p.write_text(json.dumps(d))
    out = tmp_path / "c.csv"
    assert main(["congestion-cost", "--scenario", str(p), "--method", "both", "--seed", "1",
                 "--out", str(out)]) == 0
    r = rows(out)
    assert len(r) == 18
    assert all(float(x["value"]) == 0.0 for x in r)
    assert all(x["status"] == "abs-stop" for x in r if x["method"] == "mc")


def test_congestion_deterministic_csv(tmp_path, small_grid_file):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["congestion-cost", "--scenario", str(small_grid_file), "--method", "mc", "--seed", "3",
            "--eps-rel", "0.05"]
    main(args + ["--out", str(a)])
    main(args + ["--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    ids = [x["sector_id"] for x in rows(a)]
    assert ids == sorted(ids)


# --- monitor ----------------------------------------------------------------


def test_monitor_deterministic_two_keys_per_sector(tmp_path):
    p = deterministic_corridor(tmp_path, capacity=0)
    out = tmp_path / "m.csv"
    assert main(["monitor", "--scenario", str(p), "--seed", "0", "--out", str(out)]) == 0
    r = rows(out)
    by_sector = {}
    for x in r:
        by_sector.setdefault(x["sector_id"], []).append(float(x["time"]))
    assert len(by_sector) == 11
    assert all(len(v) == 2 and v[0] < v[1] for v in by_sector.values())
    assert all(float(x["probability"]) == 1.0 for x in r)


def test_monitor_probabilities_in_range(tmp_path, small_grid_file):
    out = tmp_path / "m.csv"
    code = main(["monitor", "--scenario", str(small_grid_file), "--seed", "2", "--eps-rel", "0.05",
                 "--out", str(out)])
    assert code == 0
    r = rows(out)
    assert r and all(0.0 <= float(x["probability"]) <= 1.0 for x in r)
    keys = [(x["sector_id"], float(x["time"])) for x in r]
    assert keys == sorted(keys)


# --- convergence ------------------------------------------------------------


def test_convergence_trace(tmp_path, corridor_file):
    out = tmp_path / "c.csv"
    assert main(["convergence", "--scenario", str(corridor_file), "--seed", "5",
                 "--eps-rel", "1e-9", "--out", str(out)]) == 0
    r = rows(out)
    ns = np.array([int(x["n"]) for x in r])
    sems = np.array([float(x["sem"]) for x in r])
    assert np.all(ns[1:] == 2 * ns[:-1]) and ns[0] == 2
    assert np.all(sems > 0)
    assert -0.6 <= fit_slope(ns, sems) <= -0.4


def test_sample_gamma_feasible(tmp_path, corridor_file):
    out = tmp_path / "g.json"
    assert main(["sample-gamma", "--scenario", str(corridor_file), "--seed", "1", "--out", str(out)]) == 0
    sc = S.load(corridor_file)
    sc.check_decision(S.load_decision(out))
