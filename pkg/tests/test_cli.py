import csv
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from dotra import cli
from dotra.pipeline import RunResult
from dotra.training import TrainingDiverged

from conftest import synthetic_mnist_dir

TINY = ["--epochs-ae", "1", "--epochs-gan", "1", "--epochs-distill", "1", "--epochs-classifier", "1",
        "--n-train", "100"]


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    return synthetic_mnist_dir(tmp_path_factory.mktemp("mnist"))


def test_unknown_operation_exit_1(capsys):
    assert cli.main(["run", "--op", "tilt"]) == 1
    err = capsys.readouterr().err
    assert "rotate" in err and "split" in err and len(err.strip().splitlines()) == 1


def test_unknown_flag_and_missing_subcommand_exit_1():
    assert cli.main(["run", "--frobnicate"]) == 1
    assert cli.main([]) == 1


def test_bad_config_file_exit_1(tmp_path):
    f = tmp_path / "c.txt"
    f.write_text("ae.epochs = -3\n")
    assert cli.main(["run", "--config", str(f)]) == 1


def test_missing_data_exit_2(tmp_path, capsys):
    code = cli.main(["run", "--op", "shift", "--runs", "1", "--data-dir", str(tmp_path / "none"),
                     "--out-dir", str(tmp_path / "out"), *TINY])
    assert code == 2
    assert "train-images" in capsys.readouterr().err


def test_training_abort_exit_3(tmp_path, data_dir, monkeypatch):
    def boom(*a, **k):
        raise TrainingDiverged("cyclegan", 0, "generator")

    monkeypatch.setattr("dotra.pipeline.solve_dti", boom)
    code = cli.main(["run", "--runs", "1", "--data-dir", str(data_dir), "--out-dir", str(tmp_path), *TINY])
    assert code == 3
    assert RunResult.load(tmp_path / "shift" / "0" / "result.json").converged is False


def test_run_report_grids(tmp_path, data_dir, capsys):
    out = tmp_path / "out"
    code = cli.main(["run", "--op", "shift", "--runs", "2", "--seed", "7", "--data-dir", str(data_dir),
                     "--out-dir", str(out), *TINY])
    assert code == 0
    assert sorted(p.parent.name for p in out.glob("shift/*/result.json")) == ["7", "8"]
    assert (out / "shift" / "metrics.csv").exists()

    assert cli.main(["report", "--out-dir", str(out)]) == 0
    rows = list(csv.DictReader((out / "results_table.csv").open()))
    assert [r["method"] for r in rows] == ["DoTra", "Source"]
    assert all(set(["S", "T0", "T1", "T2"]) <= set(r) for r in rows)
    first = (out / "results_table.csv").read_bytes()
    assert cli.main(["report", "--out-dir", str(out)]) == 0
    assert (out / "results_table.csv").read_bytes() == first

    assert cli.main(["grids", "--out-dir", str(out)]) == 0
    for name in ("samples_shift.png", "truth_shift.png"):
        img = np.asarray(Image.open(out / name))
        assert img.shape == (10 * 34 + 2, 4 * 34 + 2)


def test_baseline_subcommand(tmp_path, data_dir):
    out = tmp_path / "b"
    assert cli.main(["baseline", "--op", "zoom", "--runs", "1", "--data-dir", str(data_dir),
                     "--out-dir", str(out), *TINY]) == 0
    assert (out / "zoom" / "0" / "source_only.json").exists()
    assert not (out / "zoom" / "0" / "result.json").exists()


def test_report_without_results_exit_2(tmp_path):
    assert cli.main(["report", "--out-dir", str(tmp_path)]) == 2
    assert cli.main(["grids", "--out-dir", str(tmp_path)]) == 2


def test_epoch_flags_reach_config():
    args = cli.build_parser().parse_args(["run", "--epochs-gan", "3", "--parallel-runs", "2", "--plain-generator"])
    cfg = cli.config_from_args(args)
    assert cfg.gan.epochs == 3 and cfg.parallel_runs == 2 and not cfg.residual_generator


def test_smoke_module_entry(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "dotra", "smoke", "--out-dir", str(tmp_path)],
                          capture_output=True, text=True, timeout=300)
    assert proc.returncode == 0, proc.stderr
    assert "smoke ok" in proc.stdout
    assert (tmp_path / "shift" / "0" / "result.json").exists()
