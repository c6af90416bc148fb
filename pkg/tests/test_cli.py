import csv
import json

import numpy as np
import pytest

from splatreorg import cli, scenes
from splatreorg.model import logit
from splatreorg.splat_io import read_report, read_splat, write_splat

from oracles import random_set


def run(argv, capsys):
    code = cli.main(argv)
    out, err = capsys.readouterr()
    return code, out, err


def error_line(err):
    lines = err.strip().splitlines()
    return json.loads(lines[-1])


@pytest.fixture
def splat(tmp_path):
    gs, _ = scenes.grouped_mixture_set(600, 0)
    p = tmp_path / "in.ply"
    write_splat(gs, p)
    return p


# ---- reorg

def test_reorg_defaults(splat, tmp_path, capsys):
    out = tmp_path / "out.ply"
    code, stdout, _ = run(["reorg", str(splat), str(out)], capsys)
    assert code == 0
    rep = json.loads(stdout)
    assert rep["reorg"]["output_count"] == 600 and rep["reorg"]["opacity"] == {"min": 0.01, "mean": 0.01, "max": 0.01}
    gs = read_splat(out)
    assert len(gs) == 600
    np.testing.assert_array_equal(gs.opacity_logits, np.float32(logit(0.01)))


def test_reorg_k3_accepted_and_report_file(splat, tmp_path, capsys):
    rep_path = tmp_path / "r.json"
    code, stdout, _ = run(["reorg", str(splat), str(tmp_path / "o.ply"), "--k", "3", "--report", str(rep_path)],
                          capsys)
    assert code == 0 and stdout == ""
    assert read_report(rep_path).reorg["k"] == 3


def test_reorg_is_byte_deterministic(splat, tmp_path, capsys):
    outs = []
    for name in ("a", "b"):
        p = tmp_path / f"{name}.ply"
        rp = tmp_path / f"{name}.json"
        assert run(["reorg", str(splat), str(p), "--seed", "5", "--samples", "700", "--report", str(rp)], capsys)[0] == 0
        rep = json.loads(rp.read_text())
        rep.pop("timing")
        outs.append((p.read_bytes(), rep))
    assert outs[0] == outs[1]


@pytest.mark.parametrize("flags", [["--samples", "0"], ["--k", "0"], ["--alpha0", "1.5"], ["--alpha0", "x"],
                                   ["--passes", "0"], ["--samples", "10"], ["--bogus"]])
def test_reorg_bad_flags_exit_2(splat, tmp_path, capsys, flags):
    code, _, err = run(["reorg", str(splat), str(tmp_path / "o.ply"), *flags], capsys)
    assert code == 2 and error_line(err)["error"] == "flags"


def test_reorg_bad_input_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.ply"
    bad.write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    for path in (bad, tmp_path / "missing.ply"):
        code, _, err = run(["reorg", str(path), str(tmp_path / "o.ply")], capsys)
        assert code == 1 and error_line(err)["error"] == "input"
        assert len(err.strip().splitlines()) == 1


def test_reorg_numeric_failure_exit_3(tmp_path, capsys):
    gs = random_set(np.random.default_rng(0), 30)
    dead = gs.replace(opacity_logits=np.full(30, -100.0))
    p = tmp_path / "dead.ply"
    write_splat(dead, p)
    code, _, err = run(["reorg", str(p), str(tmp_path / "o.ply")], capsys)
    e = error_line(err)
    assert code == 3 and e["error"] == "numeric" and e["stage"] == "categorical"


def test_reorg_passes_warns(splat, tmp_path, capsys, caplog):
    with caplog.at_level("WARNING", logger="splatreorg"):
        code, stdout, _ = run(["reorg", str(splat), str(tmp_path / "o.ply"), "--passes", "2"], capsys)
    assert code == 0 and "no optimization runs between passes" in caplog.text
    assert len(json.loads(stdout)["reorg"]["passes_stats"]) == 2


# ---- diagnose

def test_diagnose_single_primitive_energy_zero(tmp_path, capsys):
    p = tmp_path / "one.ply"
    write_splat(scenes.clone_cluster(1), p)
    code, stdout, _ = run(["diagnose", str(p), "--overlap-energy"], capsys)
    assert code == 0 and json.loads(stdout)["overlap_energy"]["value"] == 0.0


def test_diagnose_exact_vs_culled(tmp_path, capsys):
    gs = random_set(np.random.default_rng(3), 1000, spread=6.0)
    p = tmp_path / "r.ply"
    write_splat(gs, p)
    _, a, _ = run(["diagnose", str(p), "--overlap-energy", "--exact"], capsys)
    _, b, _ = run(["diagnose", str(p), "--overlap-energy", "--cutoff", "3"], capsys)
    ex, cu = json.loads(a)["overlap_energy"], json.loads(b)["overlap_energy"]
    assert ex["exact"] and not cu["exact"]
    assert abs(ex["value"] - cu["value"]) <= cu["truncation_bound"]


def test_diagnose_rays_and_probes(tmp_path, capsys):
    gs, _ = scenes.floater_surface_set(grid=20)
    p = tmp_path / "f.ply"
    write_splat(gs, p)
    rays = tmp_path / "rays.txt"
    rays.write_text("# origin direction\n0 0 0 0 0 1\n")
    rays_json = tmp_path / "rays.json"
    rays_json.write_text(json.dumps([{"origin": [0, 0, 0], "direction": [0, 0, 2]}]))
    for rf in (rays, rays_json):
        code, stdout, _ = run(["diagnose", str(p), "--rays", str(rf), "--probes", "10"], capsys)
        assert code == 0
        rep = json.loads(stdout)
        T = rep["ray_profiles"][0]["transmittance"]
        assert all(b <= a for a, b in zip(T, T[1:])) and T[1] == pytest.approx(0.01, rel=1e-6)
        assert len(rep["effective_overlap"]["counts"]) == 10
        assert len(rep["curvature_proxy"]["conditions"]) == 10


def test_diagnose_bad_rays(tmp_path, splat, capsys):
    rays = tmp_path / "rays.txt"
    rays.write_text("0 0 0 0 0\n")
    assert run(["diagnose", str(splat), "--rays", str(rays)], capsys)[0] == 1
    rays.write_text("0 0 0 0 0 0\n")
    assert run(["diagnose", str(splat), "--rays", str(rays)], capsys)[0] == 1


# ---- validate

def test_validate_unknown_suite_exit_2(capsys):
    code, _, err = run(["validate", "--suite", "nope"], capsys)
    assert code == 2 and error_line(err)["error"] == "flags"


def test_validate_deadlock_reports_wins(capsys):
    code, stdout, _ = run(["validate", "--suite", "deadlock"], capsys)
    rep = json.loads(stdout)
    wins = next(c for c in rep["suites"][0]["checks"] if c["name"] == "deadlock_wins")
    assert code == 0 and rep["passed"] and wins["value"] >= 9


@pytest.mark.slow
def test_validate_consistency_passes_on_defaults(capsys):
    code, stdout, err = run(["validate", "--suite", "consistency"], capsys)
    rep = json.loads(stdout)
    assert code == 0, error_line(err)
    assert rep["passed"]


def test_validate_property_failure_exit_4(monkeypatch, capsys):
    from splatreorg import validation
    failing = validation.SuiteResult("overlap", 0, [validation.Check("x", False, 1, "t")])
    monkeypatch.setattr(validation, "run_suite", lambda name, seed: [failing])
    code, stdout, err = run(["validate", "--suite", "overlap"], capsys)
    assert code == 4 and error_line(err)["failed"] == ["overlap.x"]
    assert json.loads(stdout)["passed"] is False


# ---- toy

def test_toy_zero_iters_initial_loss_only(tmp_path, capsys):
    hist = tmp_path / "h.csv"
    code, stdout, _ = run(["toy", "--scene", "deadlock", "--iters", "0", "--csv", str(hist)], capsys)
    rows = list(csv.reader(hist.open()))
    assert code == 0 and rows[0] == ["iteration", "loss", "min_transmittance"] and len(rows) == 2
    rep = json.loads(stdout)
    assert rep["initial_loss"] == rep["final_loss"]


def test_toy_csv_rows_and_reorg_determinism(tmp_path, capsys):
    outs = []
    for name, extra in (("a", ["--reorg"]), ("b", ["--reorg"]), ("c", [])):
        hist = tmp_path / f"{name}.csv"
        assert run(["toy", "--iters", "25", "--seed", "2", "--csv", str(hist), *extra], capsys)[0] == 0
        outs.append(hist.read_text())
        assert len(outs[-1].splitlines()) == 1 + 26
    assert outs[0] == outs[1] != outs[2]


def test_toy_custom_scene_file(tmp_path, capsys):
    scene = {"depths": [1.0, 2.0], "opacities": [0.5, 0.5], "colors": [[1.0], [0.0]],
             "pixels": [[]], "target": [[0.3]], "target_depth": 1.5}
    p = tmp_path / "s.json"
    p.write_text(json.dumps(scene))
    code, stdout, _ = run(["toy", "--scene", str(p), "--iters", "5", "--step", "0.1"], capsys)
    rep = json.loads(stdout)
    assert code == 0 and rep["initial_loss"] == pytest.approx(0.04) and rep["final_loss"] < rep["initial_loss"]
    assert rep["min_transmittance_initial"] == 0.5


def test_toy_bad_scene(tmp_path, capsys):
    assert run(["toy", "--scene", "nowhere"], capsys)[0] == 2
    p = tmp_path / "s.json"
    p.write_text("{not json")
    assert run(["toy", "--scene", str(p)], capsys)[0] == 1


def test_toy_divergence_exit_3(capsys):
    code, _, err = run(["toy", "--scene", "cluster", "--iters", "50", "--step", "1e308"], capsys)
    assert code == 3 and error_line(err)["stage"] == "optimize"


def test_module_entry_point():
    import subprocess
    import sys
    r = subprocess.run([sys.executable, "-m", "splatreorg", "validate", "--suite", "bad"],
                       capture_output=True, text=True)
    assert r.returncode == 2 and json.loads(r.stderr)["error"] == "flags"
