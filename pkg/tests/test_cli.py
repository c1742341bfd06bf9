from __future__ import annotations

import json
import math

import pytest

from protoverify import __version__
from protoverify.cli import load_config, main
from protoverify.errors import ConfigError

FIXTURE = "builtin:verify_fixture"


def _run(capsys, *argv):
    code = main(list(argv))
    cap = capsys.readouterr()
    return code, cap.out, cap.err


@pytest.fixture(scope="module")
def fixture_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("verify")
    assert main(["verify", "--config", FIXTURE, "--out", str(out)]) == 0
    return out


def test_fixture_report_has_overall_mape(fixture_run):
    rep = json.loads((fixture_run / "verify_report.json").read_text())
    assert rep["command"] == "verify" and rep["version"] == __version__
    assert math.isfinite(rep["mape_overall"]) and rep["mape_overall"] >= 0
    assert set(rep["mape_by_stage"]) == {"early", "mid", "late"}
    for name in rep["outputs"].values():
        assert (fixture_run / name).exists()


def test_fixture_rerun_is_byte_identical(fixture_run):
    first = (fixture_run / "verify_report.json").read_bytes()
    traj = (fixture_run / "trajectories.csv").read_bytes()
    assert main(["verify", "--config", FIXTURE, "--out", str(fixture_run)]) == 0
    assert (fixture_run / "verify_report.json").read_bytes() == first
    assert (fixture_run / "trajectories.csv").read_bytes() == traj


def test_interpret_on_fixture_outputs(fixture_run, tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[interpret]\npermutations = 8\nwindow = 40\n")
    code, _, err = _run(capsys, "interpret", "--config", str(cfg), "--out", str(tmp_path),
                        "--model", str(fixture_run / "model.json"),
                        "--matrix", str(fixture_run / "target_features.csv"))
    assert code == 0, err
    rep = json.loads((tmp_path / "interpret_report.json").read_text())
    assert 0.0 <= rep["mean_thermodynamic_share"] <= 1.0
    assert rep["sage"]


def test_missing_input_exits_2_with_path(tmp_path, capsys):
    missing = tmp_path / "absent.csv"
    code, _, err = _run(capsys, "featurize", str(missing), "--out", str(tmp_path / "o"))
    assert code == 2
    payload = json.loads(err.strip().splitlines()[-1])
    assert payload["path"] == str(missing)
    assert str(missing) in payload["message"]


def test_missing_config_file_exits_2(tmp_path, capsys):
    code, _, err = _run(capsys, "econ", "--config", str(tmp_path / "none.toml"))
    assert code == 2
    assert "none.toml" in json.loads(err)["path"]


def test_unknown_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[verify]\nearly_fraktion = 0.2\n")
    code, _, err = _run(capsys, "verify", "--config", str(cfg), "--out", str(tmp_path))
    assert code == 1
    payload = json.loads(err)
    assert payload["error"] == "ConfigError" and "early_fraktion" in payload["message"]


def test_unknown_section_and_bad_threads(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[verfy]\nseed = 1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(str(cfg), {})
    with pytest.raises(ConfigError, match="threads"):
        load_config(None, {"threads": 0})


def test_simulate_then_featurize(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[simulate]\ntemperatures_k = [318.15]\ncells_per_temperature = 1\nn_cycles = 8\n")
    sim_out = tmp_path / "sim"
    code, out, err = _run(capsys, "simulate", "--config", str(cfg), "--out", str(sim_out), "--seed", "3")
    assert code == 0, err
    rep = json.loads((sim_out / "simulate_report.json").read_text())
    assert rep["cells"] == 1 and rep["config"]["run"]["seed"] == 3
    truth = json.loads((sim_out / "truth.json").read_text())
    assert len(truth["cells"][0]["capacity"]) == 8

    feat_out = tmp_path / "feat"
    code, _, err = _run(capsys, "featurize", *[str(sim_out / f) for f in rep["files"]], "--out", str(feat_out))
    assert code == 0, err
    frep = json.loads((feat_out / "featurize_report.json").read_text())
    assert frep["rows"] == 5        # cycles 4..8 carry features
    assert (feat_out / "features.csv").read_text().count("\n") == 6


def test_simulate_is_byte_identical(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[simulate]\ntemperatures_k = [298.15]\ncells_per_temperature = 2\nn_cycles = 5\n")
    blobs = []
    for _ in range(2):
        assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
        blobs.append(sorted((p.name, p.read_bytes()) for p in (tmp_path / "o").rglob("*") if p.is_file()))
    assert blobs[0] == blobs[1]


def test_econ_default_scenario(tmp_path, capsys):
    code, _, err = _run(capsys, "econ", "--out", str(tmp_path))
    assert code == 0, err
    rep = json.loads((tmp_path / "econ_report.json").read_text())
    row = next(r for r in rep["results"]
               if r["chemistry"] == "LFP" and r["method"] == "refined_direct" and r["soh"] == 0.95)
    assert 13.01 <= row["profit"] <= 13.27
    assert rep["scrap_forecast"]["2023"] == 0.0767
    assert (tmp_path / "econ.csv").exists()


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0
    assert __version__ in capsys.readouterr().out
