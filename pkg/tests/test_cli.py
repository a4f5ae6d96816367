import json

import numpy as np
import pandas as pd
import pytest

from deepc_sampling.cli import main


@pytest.fixture(scope="module")
def lti_workspace(tmp_path_factory):
    """collect + sweep on the fast verification plant."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["collect", "--plant", "lti", "--out", str(root),
                 "--set", "collect.duration_s=20"]) == 0
    assert main(["sweep", "--plant", "lti", "--out", str(root),
                 "--set", "collect.duration_s=20", "--set", "duration_s=6"]) == 0
    return root


def test_collect_writes_dataset_and_manifest(lti_workspace):
    root = lti_workspace
    assert (root / "dataset" / "manifest.json").exists()
    assert (root / "dataset" / "trajectory_000.csv").exists()
    manifest = json.loads((root / "collect_manifest.json").read_text())
    assert manifest["pe_ok"] is True
    assert manifest["config"]["collect"]["duration_s"] == 20


def test_collect_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert main(["collect", "--plant", "lti", "--out", str(tmp_path / sub),
                     "--set", "collect.duration_s=15"]) == 0
    a = (tmp_path / "a" / "dataset" / "trajectory_000.csv").read_text()
    b = (tmp_path / "b" / "dataset" / "trajectory_000.csv").read_text()
    assert a == b


def test_missing_config_exits_2(tmp_path, capsys):
    code = main(["collect", "--config", str(tmp_path / "nope.json"),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_invalid_json_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"plant": "lti",\n  broken\n}')
    code = main(["collect", "--config", str(bad), "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "bad.json:2" in err


def test_override_reflected_in_manifest(tmp_path):
    assert main(["collect", "--plant", "lti", "--out", str(tmp_path),
                 "--set", "collect.duration_s=15", "--set", "noise.sigma_v=0"]) == 0
    manifest = json.loads((tmp_path / "collect_manifest.json").read_text())
    assert manifest["config"]["noise"]["sigma_v"] == 0


def test_unknown_override_rejected(tmp_path, capsys):
    code = main(["collect", "--plant", "lti", "--out", str(tmp_path),
                 "--set", "noise.typo=1"])
    assert code == 2
    assert "typo" in capsys.readouterr().err


def test_sweep_outputs_and_force(lti_workspace, capsys):
    root = lti_workspace
    summary = pd.read_csv(root / "summary.csv")
    assert {"plant", "strategy", "n_s", "seed_count", "median_err",
            "q1_err", "q3_err", "p99_ms", "max_ms"} == set(summary.columns)
    assert (root / "runs").is_dir()
    # rerunning into the same directory refuses without --force
    code = main(["sweep", "--plant", "lti", "--out", str(root),
                 "--set", "collect.duration_s=20", "--set", "duration_s=6"])
    assert code == 2
    assert "--force" in capsys.readouterr().err


def test_seeds_flag_limits_cells(tmp_path):
    assert main(["collect", "--plant", "lti", "--out", str(tmp_path),
                 "--set", "collect.duration_s=20"]) == 0
    assert main(["sweep", "--plant", "lti", "--out", str(tmp_path),
                 "--set", "collect.duration_s=20", "--set", "duration_s=5",
                 "--seeds", "2"]) == 0
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["seeds"] == [0, 1]
    assert len(manifest["cells"]) == 2


def test_run_single_cell(lti_workspace):
    root = lti_workspace
    assert main(["run", "--plant", "lti", "--out", str(root),
                 "--set", "collect.duration_s=20", "--set", "duration_s=5",
                 "--strategy", "full", "--seed", "1"]) == 0
    assert (root / "runs" / "lti_full_nsall_seed1.csv").exists()


def test_report_emits_plot_ready_csvs(lti_workspace):
    root = lti_workspace
    assert main(["report", str(root)]) == 0
    box = pd.read_csv(root / "boxplot_data.csv")
    assert list(box.columns) == ["plant", "strategy", "n_s", "e_t"]
    assert len(box) > 0
    timing = pd.read_csv(root / "timing_table.csv")
    assert list(timing.columns) == ["plant", "strategy", "n_s", "p99_ms", "max_ms"]
    # timing table mirrors summary.csv
    summary = pd.read_csv(root / "summary.csv")
    assert np.allclose(timing["p99_ms"], summary["p99_ms"])


def test_report_missing_dir_fails(tmp_path, capsys):
    code = main(["report", str(tmp_path / "empty")])
    assert code == 2
    assert "summary" in capsys.readouterr().err


def test_gridsearch_writes_table(lti_workspace):
    root = lti_workspace
    assert main(["gridsearch", "--plant", "lti", "--out", str(root),
                 "--set", "collect.duration_s=20", "--set", "duration_s=4",
                 "--lambda-g", "1e-9", "--lambda-sigma", "1e4"]) == 0
    table = pd.read_csv(root / "gridsearch.csv")
    assert {"lambda_g_bar", "lambda_sigma", "median_err", "p99_ms", "completed"} \
        == set(table.columns)
    assert len(table) == 1
