import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import msbasis.fem as fem
import msbasis.harness.cli as cli
from msbasis.errors import ConfigError
from msbasis.harness import checks
from msbasis.harness.cli import main
from msbasis.harness.config import ExperimentConfig, load_config
from msbasis.harness.rhs import parse_expression, resolve_rhs
from msbasis.harness.sweeps import run_convergence
from msbasis.mesh import build_hierarchy


def _write_config(path, **kw):
    cfg = {"coefficient": {"family": "trig"}, "nc": [8], "nf": 64, "m": [3],
           "output_dir": str(path / "out"), "store": str(path / "store")}
    cfg.update(kw)
    p = path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_rhs_parser():
    f = parse_expression("x1^4 - x2^3 + 1")
    assert f(0.5, 0.5) == pytest.approx(0.5**4 - 0.5**3 + 1)
    g, text = resolve_rhs("const_minus_one")
    assert text == "-1"
    np.testing.assert_array_equal(g(np.zeros(3), np.ones(3)), -1.0)
    h, _ = resolve_rhs("2*pi^2*sin(pi*x1)*cos(pi*x2)")
    assert h(0.5, 0.0) == pytest.approx(2 * np.pi**2)
    assert resolve_rhs(-1)[1] == "-1.0"
    for bad in ("import os", "x3 + 1", "__import__('os')", "exp(x1)", "x1 +", "x1.real", [1]):
        with pytest.raises(ConfigError):
            resolve_rhs(bad)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-10, 10), b=st.floats(-10, 10), x=st.floats(0, 1), y=st.floats(0, 1))
def test_rhs_parser_matches_python(a, b, x, y):
    f = parse_expression(f"({a!r})*x1 - ({b!r})*x2^2 + sin(x1*x2)")
    assert f(x, y) == pytest.approx(a * x - b * y**2 + np.sin(x * y), rel=1e-12, abs=1e-12)


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(nc=[3], nf=64)
    with pytest.raises(ConfigError):
        ExperimentConfig(variants=[4])
    with pytest.raises(ConfigError):
        ExperimentConfig(coefficient={"family": "nope"})
    with pytest.raises(ConfigError):
        ExperimentConfig(rhs="exp(x1)")
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(p)
    cfg = load_config(None, nf=64, nc=[8])
    assert cfg.hash() == load_config(None, nf=64, nc=[8]).hash()
    assert cfg.hash() != cfg.with_overrides(seed=3).hash()


def test_cli_exit_codes(tmp_path, capsys):
    assert main(["offline", "--config", str(tmp_path / "missing.json")]) == 1
    bad = _write_config(tmp_path, nc=[7])
    assert main(["offline", "--config", str(bad)]) == 1
    with pytest.raises(SystemExit):
        main(["frobnicate"])


def test_offline_store_and_solves(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["offline", "--config", str(cfg)]) == 0
    store = tmp_path / "store" / "nc-8"
    manifest = json.loads((store / "manifest.json").read_text())
    assert len(manifest["edges"]) == 112
    assert all(len(rec["singular_values"]) >= 3 and rec["m_e"] == 3 for rec in manifest["edges"])
    first = {n: (store / n).read_bytes() for n in ("manifest.json", "payload.bin")}
    assert main(["offline", "--config", str(cfg)]) == 0
    for n, data in first.items():
        assert (store / n).read_bytes() == data

    assert main(["solve", "--config", str(cfg), "--variant", "1", "--m", "2", "--rhs", "zero"]) == 0
    rep = json.loads((tmp_path / "out" / "report-nc8-m2-k1.json").read_text())
    assert rep["errors"] == {"e_E": 0.0, "e_L2": 0.0}
    mtime = (store / "payload.bin").stat().st_mtime_ns
    assert main(["solve", "--config", str(cfg), "--variant", "3", "--m", "3"]) == 0
    rep = json.loads((tmp_path / "out" / "report-nc8-m3-k3.json").read_text())
    assert not rep["provenance"]["offline_recomputed"]
    assert 0 < rep["errors"]["e_E"] < 1
    assert (store / "payload.bin").stat().st_mtime_ns == mtime

    # the store was built for nf=64
    capsys.readouterr()
    assert main(["solve", "--config", str(cfg), "--nf", "128"]) == 1
    assert "nf=64" in capsys.readouterr().err
    # more enrichments than the store holds
    assert main(["solve", "--config", str(cfg), "--m", "5"]) == 1


def test_solve_without_store(tmp_path):
    cfg = _write_config(tmp_path)
    assert main(["solve", "--config", str(cfg)]) == 1


def test_convergence_empty_m_list(tmp_path):
    cfg = _write_config(tmp_path, m=[])
    assert main(["convergence", "--config", str(cfg)]) == 0
    for name, header in (("sweep_H.csv", "nc,m,variant,e_E,e_L2"), ("sweep_m.csv", "m,variant,e_E,e_L2")):
        assert (tmp_path / "out" / name).read_text() == header + "\n"


def test_convergence_deterministic_across_workers(tmp_path):
    base = dict(coefficient={"family": "contrast", "contrast": 1024.0}, rhs="poly_x1p4_x2p3",
                nc=[4, 8], nf=32, m=[0, 1, 2], variants=[1, 2, 3])
    tables = []
    for workers in (1, 4):
        cfg = ExperimentConfig(**base, parallelism=workers, output_dir=str(tmp_path / f"o{workers}"),
                               store=str(tmp_path / f"s{workers}"))
        run_convergence(cfg)
        tables.append([(tmp_path / f"o{workers}" / n).read_text() for n in ("sweep_H.csv", "sweep_m.csv")])
        for nc in (4, 8):
            assert (tmp_path / f"s{workers}" / f"nc-{nc}" / "manifest.json").exists()
    assert tables[0] == tables[1]
    rows = list(csv.DictReader((tmp_path / "o1" / "sweep_H.csv").open()))
    assert len(rows) == 2 * 3 * 3
    assert [r["nc"] for r in rows[:9]] == ["4"] * 9
    for name in ("manifest.json", "payload.bin"):
        assert ((tmp_path / "s1" / "nc-8" / name).read_bytes()
                == (tmp_path / "s4" / "nc-8" / name).read_bytes())


def test_check_command_json(capsys, monkeypatch):
    monkeypatch.setattr(cli, "run_property_suite", lambda: [checks.CheckResult("x", True, 0.0, 1.0)])
    assert main(["check", "--json"]) == 0
    assert json.loads(capsys.readouterr().out)[0]["name"] == "x"


def test_property_suite_passes():
    report = checks.run_property_suite()
    failed = [r.line() for r in report if not r.passed]
    assert not failed, "\n".join(failed)


def test_sign_flip_mutation_breaks_orthogonality(monkeypatch):
    K = fem.REFERENCE_STIFFNESS.copy()
    K[0, 1] = -K[0, 1]
    monkeypatch.setattr(fem, "REFERENCE_STIFFNESS", K)
    grid = build_hierarchy(4, 16)
    field = checks._field(grid, "multiscale_trig")
    results = {r.name: r for r in checks.check_splitting(grid, field, "mutant")}
    assert not results["orthogonality u^h _|_ u^b [mutant]"].passed
