import json
import subprocess
import sys

import pytest

from panalloc.acceptance import scenario_path
from panalloc.cli import EXIT_CONFIG, EXIT_FAIL, EXIT_OK, main
from panalloc.core import default_catalog_path


@pytest.fixture
def perturbed_catalog(tmp_path):
    data = json.loads(default_catalog_path().read_text())
    for row in data["connectivity"]:
        if row["device"] == "Phone" and row["transport"] == "Bluetooth":
            row["per_byte_mJ"] *= 2
    path = tmp_path / "catalog.json"
    path.write_text(json.dumps(data))
    return path


def test_encode_decode_round_trip(capsys):
    msg = {"type": "Assignments", "rd_pairs": [[2, 1]], "vd_pairs": [[3, 1]]}
    assert main(["encode", json.dumps(msg)]) == EXIT_OK
    hexed = capsys.readouterr().out.strip()
    assert hexed == "04010201010301"
    assert main(["decode", hexed]) == EXIT_OK
    assert json.loads(capsys.readouterr().out) == msg


def test_decode_garbage_is_a_protocol_failure(capsys):
    assert main(["decode", "ff00"]) == EXIT_FAIL
    assert "protocol error" in capsys.readouterr().err


def test_validate_energy_arithmetic_passes(capsys):
    assert main(["validate", "--only", "4"]) == EXIT_OK
    assert capsys.readouterr().out.rstrip().endswith("PASS")


def test_validate_with_perturbed_catalog_fails(perturbed_catalog, capsys):
    assert main(["validate", "--only", "4", "--catalog", str(perturbed_catalog)]) == EXIT_FAIL
    assert capsys.readouterr().out.rstrip().endswith("FAIL")


def test_catalog_from_environment(perturbed_catalog, monkeypatch, capsys):
    monkeypatch.setenv("AFV_CATALOG", str(perturbed_catalog))
    assert main(["validate", "--only", "4"]) == EXIT_FAIL


def test_missing_catalog_is_a_config_error(tmp_path, capsys):
    assert main(["validate", "--only", "4", "--catalog", str(tmp_path / "nope.json")]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_unknown_criterion(capsys):
    assert main(["validate", "--only", "42"]) == EXIT_CONFIG


def test_sweep_ratio_writes_outputs(tmp_path):
    assert main(["sweep-ratio", "--trials", "3", "--ratios", "0.5,2", "--out", str(tmp_path)]) == EXIT_OK
    lines = (tmp_path / "sweep_ratio.csv").read_text().splitlines()
    assert lines[0] == "ratio,strategy,mean_cost_reduction_pct,std,mean_abs_saving,n_trials"
    assert len(lines) == 1 + 2 * 3
    summary = json.loads((tmp_path / "sweep_ratio.json").read_text())
    assert set(summary["gap_vs_exact_pct"]) == {"0.5", "2.0"}


def test_sweep_functions_to_stdout(capsys):
    assert main(["sweep-functions", "--trials", "2", "--functions", "1-3"]) == EXIT_OK
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("n_functions,strategy")
    assert len(out) == 1 + 3 * 3


def test_uptime_with_baseline_and_trace(tmp_path):
    args = ["uptime", str(scenario_path("uptime_afv")), "--baseline", str(scenario_path("uptime_watch_only")),
            "--soc-sweep", "1", "--trace", "--out", str(tmp_path)]
    assert main(args) == EXIT_OK
    for name in ("uptime.csv", "uptime.json", "soc_sweep.csv", "soc_series.csv", "events.json"):
        assert (tmp_path / name).exists(), name
    summary = json.loads((tmp_path / "uptime.json").read_text())
    assert summary["baselines"]["uptime_watch_only"]["system"]["hours"] > 0


def test_uptime_bad_scenario(tmp_path):
    bad = tmp_path / "s.json"
    bad.write_text('{"devices": []')
    assert main(["uptime", str(bad)]) == EXIT_CONFIG


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "panalloc", "decode", "05"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout) == {"type": "Data", "entries": []}
