import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from fourwire import __version__
from fourwire.cli import atomic_write, main
from fourwire.dss import parse_dss, write_dss
from fourwire.harness import GenSpec, gen_random_network
from fourwire.model import network_from_json, network_to_json
from fourwire.solver import solution_to_dict, solve_powerflow
from fourwire.transform import transform_network

FIXTURES = Path(__file__).parent / "fixtures" / "dss"


def run(*args, env=None):
    full_env = {**os.environ, **(env or {})}
    return subprocess.run([sys.executable, "-m", "fourwire", *map(str, args)], capture_output=True, text=True,
                          env=full_env)


def test_version():
    res = run("--version")
    assert res.returncode == 0 and res.stdout.strip() == f"fourwire {__version__}"


def test_unknown_subcommand_is_usage_error():
    res = run("frobnicate")
    assert res.returncode == 2 and "usage:" in res.stderr and res.stdout == ""


def test_missing_required_flag(capsys):
    assert main(["transform", "--kind", "t"]) == 2
    assert "--in" in capsys.readouterr().err


def test_transform_dss(tmp_path):
    out = tmp_path / "two_bus_t.dss"
    assert main(["transform", "--kind", "t", "--in", str(FIXTURES / "two_bus.dss"), "--out", str(out)]) == 0
    expected = write_dss(transform_network(parse_dss((FIXTURES / "two_bus.dss").read_text()), "t"))
    assert out.read_text() == expected


def test_transform_json_to_json(tmp_path):
    net = gen_random_network(GenSpec(seed=2, n_buses=6))
    src = tmp_path / "n.json"
    src.write_text(network_to_json(net))
    out = tmp_path / "k.json"
    assert main(["transform", "--kind", "k", "--in", str(src), "--out", str(out)]) == 0
    assert network_from_json(out.read_text()) == transform_network(net, "k")


def test_solve_matches_library(tmp_path):
    out = tmp_path / "sol.json"
    path = FIXTURES / "single_phase_laterals.dss"
    assert main(["solve", "--in", str(path), "--out", str(out), "--tol", "1e-11"]) == 0
    from fourwire.solver import SolveOptions

    sol = solve_powerflow(parse_dss(path.read_text()), SolveOptions(tolerance=1e-11))
    got = json.loads(out.read_text())
    ref = solution_to_dict(sol)
    assert got == json.loads(json.dumps(ref))


def test_solve_divergence_exits_zero(tmp_path):
    out = tmp_path / "sol.json"
    res = run("solve", "--in", FIXTURES / "overloaded_two_bus.dss", "--max-iter", "30", "--out", out)
    assert res.returncode == 0
    data = json.loads(out.read_text())
    assert data["converged"] is False and data["iterations"] == 30
    assert "did not converge" in res.stderr


def test_solve_format_flag_overrides_extension(tmp_path):
    src = tmp_path / "feeder.txt"
    src.write_text((FIXTURES / "two_bus.dss").read_text())
    res = run("solve", "--in", src, "--format", "dss")
    assert res.returncode == 0 and json.loads(res.stdout)["converged"] is True


def test_domain_error_json(tmp_path):
    bad = tmp_path / "bad.dss"
    bad.write_text("New Circuit.x bus1=s basekv=0.4\nNew Transformer.t1 buses=[s t]\n")
    res = run("--json-errors", "check", "--in", bad)
    assert res.returncode == 1
    err = json.loads(res.stderr)
    assert err["error"] == "UnsupportedElement" and "transformer.t1" in err["message"] and err["exit_code"] == 1
    plain = run("check", "--in", bad)
    assert plain.returncode == 1 and plain.stderr.startswith("error:")


def test_missing_input_is_usage_error(tmp_path):
    res = run("--json-errors", "solve", "--in", tmp_path / "nope.json")
    assert res.returncode == 2 and json.loads(res.stderr)["exit_code"] == 2


def test_check_ok():
    res = run("check", "--in", FIXTURES / "meshed_ring.dss")
    assert res.returncode == 0 and res.stdout.startswith("ok: 4 buses")


def test_gen_compare_recover_pipeline(tmp_path):
    net_path = tmp_path / "net.json"
    assert main(["gen", "--seed", "7", "--buses", "5:12", "--topology", "meshed", "--extra-edges", "1",
                 "--linecode", "shared", "--out", str(net_path)]) == 0
    spec = GenSpec(seed=7, n_buses=(5, 12), topology="meshed", extra_edges=1, linecode="shared")
    assert net_path.read_text() == network_to_json(gen_random_network(spec))

    net = network_from_json(net_path.read_text())
    t_path = tmp_path / "net_t.json"
    assert main(["transform", "--kind", "t", "--in", str(net_path), "--out", str(t_path)]) == 0
    s3, s4 = tmp_path / "s3.json", tmp_path / "s4.json"
    assert main(["solve", "--in", str(t_path), "--out", str(s3)]) == 0
    assert main(["solve", "--in", str(net_path), "--out", str(s4)]) == 0
    rec_path = tmp_path / "rec.json"
    assert main(["recover", "--net4", str(net_path), "--solution3", str(s3), "--solution4", str(s4),
                 "--out", str(rec_path)]) == 0
    rec = json.loads(rec_path.read_text())
    assert set(rec["neutral_voltages"]) == {b.id for b in net.buses}
    assert rec["recovery_error"] <= 1e-9 and rec["consistency_residual"] <= 1e-9

    res = run("compare", "--net", net_path, "--kind", "t", "k", "--format", "csv")
    lines = res.stdout.strip().splitlines()
    assert res.returncode == 0 and len(lines) == 3 and lines[1].startswith(f"{net.name},t,")


def test_gen_bad_spec_is_usage_error():
    assert main(["gen", "--unbalance", "3"]) == 2


def test_suite(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seeds": [1, 2], "n_buses": [5, 8], "kinds": ["t", "u"]}))
    res = run("suite", "--config", cfg, "--out-dir", tmp_path / "out", "--jobs", "2")
    assert res.returncode == 0
    csv_lines = (tmp_path / "out" / "report.csv").read_text().splitlines()
    assert len(csv_lines) == 5
    hist = json.loads((tmp_path / "out" / "histograms.json").read_text())
    assert set(hist) == {"t", "u"}
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seeds": [1], "colour": "red"}))
    assert run("suite", "--config", bad, "--out-dir", tmp_path / "o2").returncode == 1
    assert run("suite", "--config", cfg, "--out-dir", tmp_path / "o3", "--jobs", "0").returncode == 2


def test_log_level_env(tmp_path):
    src = tmp_path / "g.json"
    net = gen_random_network(GenSpec(seed=1, n_buses=4, shunt_scale=1e-6))
    src.write_text(network_to_json(net))
    loud = run("transform", "--kind", "t", "--in", src, "--out", tmp_path / "t.json")
    assert "DroppedShuntWarning" in loud.stderr
    quiet = run("transform", "--kind", "t", "--in", src, "--out", tmp_path / "t.json", env={"FOURWIRE_LOG": "error"})
    assert quiet.returncode == 0 and quiet.stderr == ""
    debug = run("gen", "--seed", "5", "--buses", "40", "--out", tmp_path / "x.json", env={"FOURWIRE_LOG": "info"})
    assert debug.returncode == 0


def test_atomic_write_leaves_no_temp_and_keeps_old_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "out.txt"
    atomic_write(target, "first")
    assert target.read_text() == "first"

    def boom(*_a):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        atomic_write(target, "second")
    assert target.read_text() == "first"
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


def test_output_directory_must_exist(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "missing" / "x.json")]) == 2
