import csv
import json

import numpy as np
import pytest

from fracfilter import cli, experiment as X, solver as S
from fracfilter.config import ConfigError, load_config
from fracfilter.plotting import MissingArtifactError, contour_levels, render_plots

TINY_FILTERS = {"J": 10, "M": 5, "R": 1, "n_steps": 20, "N_e": 10}
TINY_TC1 = {"preset": "testcase1", "geometry": {"h": 0.1}, "time": {"n_fine": 40, "n_filter": 4},
            "filters": TINY_FILTERS, "field_steps": [2]}


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- configuration

def test_preset_testcase1():
    cfg = load_config(preset_name="testcase1")
    assert cfg["geometry"]["h"] == 0.025 and (cfg.nx, cfg.ny) == (80, 40)
    assert cfg.dt_ref == pytest.approx(cfg["time"]["T"] / 800)
    assert cfg["time"]["n_filter"] == 50
    assert cfg["model"]["true_params"] == [1.0, 1.0, 2.0]
    assert cfg["model"]["initial_guess"] == [8.0, 8.0, 8.0]
    f = cfg["filters"]
    assert (f["J"], f["M"], f["R"], f["n_steps"], f["N_e"]) == (200, 30, 3, 200, 100)
    assert cfg.labels == ["full", "mask75", "mixed50"]
    assert cfg.model_noise_std == pytest.approx(0.001 * np.sqrt(1 / 50))


def test_preset_testcase2_and_3():
    c2 = load_config(preset_name="testcase2")
    assert (c2["filters"]["M"], c2["filters"]["R"]) == (50, 4)
    assert c2["model"]["true_params"] == [1.0, 1.0, 2000.0]
    assert [c2.scenario(s).model_noise_std for s in c2.labels] == pytest.approx(
        [c * np.sqrt(1 / 50) for c in (1e-3, 1e-2, 1e-1)])
    c3 = load_config(preset_name="testcase3")
    assert c3["time"]["T"] == 5.0 and c3["time"]["n_filter"] == 50
    assert (c3["filters"]["M"], c3["filters"]["R"]) == (40, 4)
    assert c3["model"]["parameterization"] == "reciprocal"
    assert c3["model"]["true_params"] == pytest.approx([1 / 3.15e-4, 1 / 3.15e-4, 1 / (9.92e-3 * 0.1)])
    assert c3["geometry"]["fracture"]["width"] == 0.1
    small = load_config(preset_name="testcase1-small")
    assert small["geometry"]["h"] == 0.05 and small["filters"]["J"] == 100


@pytest.mark.parametrize("override, field", [
    ({"time": {"n_fine": 800, "n_filter": 33}}, "time.n_filter"),
    ({"geometry": {"h": 0.03}}, "geometry.h"),
    ({"noise": {"model_noise_c": -1.0}}, "noise.model_noise_c"),
    ({"filters": {"R": 0}}, "filters.R"),
    ({"model": {"initial_guess": [1.0, 2.0]}}, "model.initial_guess"),
    ({"seed": -3}, "seed"),
    ({"bogus": 1}, "bogus"),
    ({"observation": {"obs_noise_std": -1}}, "observation.obs_noise_std"),
])
def test_validation_names_field(override, field):
    with pytest.raises(ConfigError) as info:
        load_config(preset_name="testcase1", overrides=override)
    assert str(info.value).startswith(field)


def test_load_from_file_and_parse_error(tmp_path):
    good = tmp_path / "c.json"
    good.write_text(json.dumps(TINY_TC1))
    cfg = load_config(good)
    assert cfg["case"] == 1 and cfg["filters"]["J"] == 10 and cfg["filters"]["M"] == 5
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="parse"):
        load_config(bad)
    with pytest.raises(ConfigError, match="preset"):
        load_config(preset_name="nope")


def test_resolved_config_round_trip():
    cfg = load_config(TINY_TC1)
    again = load_config(json.loads(cfg.to_json()))
    assert again.to_json() == cfg.to_json()


# ---------------------------------------------------------------- experiments

@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    res = X.run_experiment(load_config(TINY_TC1), "both", out, scenarios=["mixed50"])
    return out, res


def test_artifacts_written(tiny_run):
    out, res = tiny_run
    for name in ("resolved_config.json", "observations.csv", "rmse.csv", "params.csv", "particles.csv",
                 "comparison.csv", "fields_step_2.csv", "fields_step_4.csv", "fracture_step_4.csv"):
        assert (out / name).exists(), name
    rm = _rows(out / "rmse.csv")
    assert list(rm[0]) == ["step", "time", "rmse", "filter"]
    assert {r["filter"] for r in rm} == {"united/mixed50", "augenkf/mixed50"}
    assert len(rm) == 8
    pr = _rows(out / "params.csv")
    assert list(pr[0])[:7] == ["step", "component", "mean", "p05", "p50", "p95", "truth"]
    first = [r for r in pr if r["step"] == "0" and r["filter"] == "united/mixed50"]
    assert [float(r["mean"]) for r in first] == [8.0, 8.0, 8.0]
    assert [float(r["truth"]) for r in first] == [1.0, 1.0, 2.0]
    fields = _rows(out / "fields_step_4.csv")
    assert list(fields[0]) == ["x", "y", "pressure", "u_x", "u_y", "series"]
    assert {r["series"] for r in fields} == {"reference", "united/mixed50", "augenkf/mixed50"}


def test_observations_csv_matches_records(tiny_run):
    out, res = tiny_run
    recs = res["results"]["mixed50"]["records"]
    rows = _rows(out / "observations.csv")
    assert len(rows) == sum(len(r.values) for r in recs)
    assert float(rows[0]["value"]) == recs[0].values[0]


def test_plots_rendered(tiny_run):
    out, _ = tiny_run
    plots = {p.name for p in (out / "plots").glob("*.svg")}
    assert {"rmse.svg", "params.svg", "fracture_step4.svg"} <= plots
    assert "heat_step4_reference.svg" in plots and "contour_step4_reference.svg" in plots
    svg = (out / "plots" / "params.svg").read_text()
    assert all(name in svg for name in ("k1", "k2", "alpha_f"))
    again = render_plots(out)
    assert (out / "plots" / "rmse.svg").read_bytes() == again[0].read_bytes()


def test_replay_is_byte_identical(tiny_run, tmp_path):
    out, _ = tiny_run
    X.run_experiment(load_config(out / "resolved_config.json"), "both", tmp_path, plots=False)
    for name in ("rmse.csv", "params.csv", "observations.csv", "comparison.csv"):
        assert (out / name).read_bytes() == (tmp_path / name).read_bytes(), name


def test_contour_levels():
    lv = contour_levels([3.0, -1.0, 0.5])
    assert len(lv) == 10 and lv[0] == -1.0 and lv[-1] == 3.0
    assert np.allclose(np.diff(lv), 4.0 / 9)


def test_missing_artifacts(tmp_path):
    with pytest.raises(MissingArtifactError):
        render_plots(tmp_path)
    assert cli.main(["plot", "--in", str(tmp_path)]) == 1


def test_testcase2_problem_and_jump_signs():
    cfg = load_config(preset_name="testcase2", overrides={"geometry": {"h": 0.125},
                                                          "time": {"n_fine": 40, "n_filter": 4}})
    prob = X.build_problem(cfg)
    times, traj = X.reference_trajectory(prob)
    assert traj.shape == (4, prob.dofs.total_dim)
    assert X.fracture_jump_signs(traj[-1], prob) == [-1, -1]


def test_testcase3_problem_darcy_fields():
    cfg = load_config(preset_name="testcase3", overrides={"geometry": {"h": 0.1},
                                                          "time": {"n_fine": 40, "n_filter": 4}})
    prob = X.build_problem(cfg)
    assert S.is_divergence_free(prob.darcy_true, prob.darcy_disc)
    assert not S.is_divergence_free(prob.darcy_model, prob.darcy_disc)
    _, traj = X.reference_trajectory(prob)
    c = traj[-1]
    assert c[prob.dofs.pressure_dofs].min() > -1e-8 and c[prob.dofs.pressure_dofs].max() < 1 + 1e-8


# ---------------------------------------------------------------- command line

def test_cli_run_show_and_verify(tmp_path, capsys):
    cfg_path = tmp_path / "c.json"
    cfg_path.write_text(json.dumps(TINY_TC1))
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(cfg_path), "--filter", "united", "--out", str(out),
                     "--scenario", "full", "--seed", "5", "--no-plots"]) == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["seed"] == 5 and resolved["filters"]["J"] == 10
    assert not (out / "plots").exists()
    assert cli.main(["plot", "--in", str(out)]) == 0
    assert (out / "plots" / "rmse.svg").exists()
    capsys.readouterr()
    assert cli.main(["show-config", "--preset", "testcase3"]) == 0
    assert json.loads(capsys.readouterr().out)["time"]["T"] == 5.0
    assert cli.main(["verify"]) == 0
    text = capsys.readouterr().out
    assert text.count("PASS") >= 5 and "FAIL" not in text


def test_cli_errors(tmp_path, capsys, monkeypatch):
    assert cli.main(["run", "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"preset": "testcase1", "time": {"n_filter": 33}}))
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "time.n_filter" in capsys.readouterr().err

    def boom(*a, **k):
        raise S.SolverError("singular operator")

    monkeypatch.setattr(X, "run_united", boom)
    good = tmp_path / "good.json"
    good.write_text(json.dumps(TINY_TC1))
    assert cli.main(["run", "--config", str(good), "--out", str(tmp_path / "o2"), "--scenario", "full"]) == 1
    report = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert report["module"] == "united_filter" and report["scenario"] == "full"
    assert "singular" in report["error"]
