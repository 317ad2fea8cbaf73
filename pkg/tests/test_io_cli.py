import json

import numpy as np
import pytest

from tlspose import io
from tlspose.cli import main
from tlspose.errors import ScenarioFormatError
from tlspose.generate import GenerationRecipe, gen_scenario


def _doc(reference):
    return io.scenario_to_dict(reference)


def _same(a, b):
    for name in ("A", "p", "r", "b", "u", "v"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    for name in ("R_r", "R_b", "R_u", "R_v"):
        assert np.array_equal(getattr(a.noise, name), getattr(b.noise, name)), name


def test_round_trip(reference, tmp_path):
    path = tmp_path / "s.json"
    io.save_scenario(reference, path)
    _same(io.load_scenario(path), reference)
    s = gen_scenario(GenerationRecipe(n_features=5, seed=3))
    io.save_scenario(s, path)
    _same(io.load_scenario(path), s)


def test_missing_field_names_feature(reference):
    doc = _doc(reference)
    del doc["features"][2]["R_u"]
    with pytest.raises(ScenarioFormatError, match=r"features\[2\].*R_u"):
        io.scenario_from_dict(doc)


def test_b_u_regenerated(reference):
    doc = _doc(reference)
    for f in doc["features"]:
        del f["b"], f["u"]
    s = io.scenario_from_dict(doc)
    assert np.allclose(s.u, reference.u, rtol=1e-12) and np.allclose(s.b, reference.b, atol=1e-12)
    doc["features"][0]["b"] = [1.0, 0.0, 0.0]
    with pytest.raises(ScenarioFormatError, match="together"):
        io.scenario_from_dict(doc)


def test_json_errors_carry_location(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"attitude": [1, 2,\n  ]}')
    with pytest.raises(ScenarioFormatError, match="line 2, column"):
        io.load_scenario(path)
    with pytest.raises(ScenarioFormatError, match="shape"):
        io.scenario_from_dict({"attitude": [1, 2], "position": [0, 0, 0], "features": []})
    with pytest.raises(ScenarioFormatError):
        io.load_scenario(tmp_path / "missing.json")


def test_measurements_round_trip(reference, tmp_path):
    m = reference.exact_measurements()
    io.save_measurements(m, tmp_path / "m.json")
    back = io.load_measurements(tmp_path / "m.json", reference.noise)
    assert np.array_equal(back.r, m.r) and np.array_equal(back.v, m.v)


def test_cli_solve_zero_noise(tmp_path, reference):
    assert main(["solve", "--zero-noise", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "solution.json").read_text())
    assert doc["converged"]
    assert np.max(np.abs(np.array(doc["attitude"]) - reference.A)) <= 1e-7
    assert np.max(np.abs(np.array(doc["position"]) - reference.p)) <= 1e-7
    assert doc["uncertainty"]["evaluation_mode"] == "at-estimate"


def test_cli_solve_deterministic(tmp_path):
    for d in ("a", "b"):
        assert main(["solve", "--seed", "42", "--out", str(tmp_path / d)]) == 0
    for name in ("solution.json", "measurements.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    # re-solving the written measurements reproduces the report
    assert main(["solve", "--measurements", str(tmp_path / "a" / "measurements.json"),
                 "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "a" / "solution.json").read_bytes() == (tmp_path / "c" / "solution.json").read_bytes()


def test_cli_exit_codes(tmp_path, reference, capsys):
    doc = _doc(reference)
    del doc["features"][1]["R_u"]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert main(["solve", "--scenario", str(bad), "--out", str(tmp_path)]) == 2
    assert "features[1]" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        main(["sensitivity", "--eps", "-5"])
    assert exc.value.code == 2
    # collinear directions make the information matrix singular
    doc = _doc(reference)
    for f in doc["features"]:
        f["r"] = doc["features"][0]["r"]
        del f["b"], f["u"]
    degenerate = tmp_path / "degenerate.json"
    degenerate.write_text(json.dumps(doc))
    assert main(["fim", "--scenario", str(degenerate), "--out", str(tmp_path)]) == 3


def test_cli_gen_scenario(tmp_path):
    for d in ("a", "b"):
        assert main(["gen-scenario", "--seed", "4", "--out", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "scenario.json").read_bytes()
    assert a == (tmp_path / "b" / "scenario.json").read_bytes()
    s = io.load_scenario(tmp_path / "a" / "scenario.json")
    _same(s, gen_scenario(GenerationRecipe(seed=4)))
    assert main(["gen-scenario", "--n-features", "2", "--out", str(tmp_path)]) == 2
    with pytest.raises(ValueError):
        GenerationRecipe(n_features=2)


def test_default_recipe_depth_variances():
    for seed in range(20):
        s = gen_scenario(GenerationRecipe(seed=seed))
        for R in (s.noise.R_u, s.noise.R_v):
            assert np.all((R >= 1e3) & (R <= 1e6))
        assert np.all(s.u >= 1.0) and np.all(s.v >= 1.0)
        assert np.allclose(np.linalg.eigvalsh(s.noise.R_r).max(axis=1), np.deg2rad(0.006) ** 2)


def test_cli_sensitivity(tmp_path):
    assert main(["sensitivity", "--eps", "1,10,100,1000", "--no-validate", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "sweep.csv").read_text().splitlines()[1:]
    rc = [float(r.split(",")[1]) for r in rows]
    assert len(rows) == 4 and all(b < a for a, b in zip(rc, rc[1:]))
    assert main(["sensitivity", "--eps", "190", "--out", str(tmp_path / "base")]) == 0
    rows = (tmp_path / "base" / "sweep.csv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("190")
    doc = json.loads((tmp_path / "base" / "derivatives.json").read_text())
    assert doc["fd_passed"] and doc["logdet_negative"]


def test_cli_montecarlo_low_sample(tmp_path, capsys):
    assert main(["montecarlo", "--trials", "100", "--seed", "1", "--out", str(tmp_path)]) == 0
    assert "low-sample" in capsys.readouterr().err
    doc = json.loads((tmp_path / "mc_report.json").read_text())
    assert doc["low_sample"] and doc["n_trials"] == 100
    for name in ("trials.csv", "coverage.csv", "comparison.csv"):
        assert (tmp_path / name).exists()
    head = (tmp_path / "trials.csv").read_text().splitlines()[0].split(",")
    assert head[:4] == ["trial", "converged", "iters", "dalpha_x"]


def test_cli_fim(tmp_path):
    assert main(["fim", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "fim.json").read_text())
    assert doc["rcond"] > 0 and len(doc["components"]) == len(doc["F"])
