"""End-to-end checks of the console entry points.

Most tests drive ``main(argv)`` in process to keep the suite fast; one
subprocess test proves the ``python -m shapeprior`` plumbing works.
"""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from shapeprior.cli import main
from shapeprior.training import METRICS_HEADER

EXTENTS = "8x16x16"


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("clids")
    rc = main(["gen-data", "--out", str(root), "--cases", "4",
               "--seed", "0", "--extents", EXTENTS])
    assert rc == 0
    return str(root / "manifest.json")


@pytest.fixture(scope="session")
def trained(tmp_path_factory, dataset):
    out = tmp_path_factory.mktemp("clirun")
    cfg = {
        "manifest": dataset,
        "out_dir": str(out),
        "epochs": 1,
        "warmup_epochs": 0,
        "model": {"base_width": 4, "patch_extents": [8, 16, 16],
                  "spm_enabled": True, "seed": 0},
    }
    cfg_path = out / "cfg.json"
    cfg_path.write_text(json.dumps(cfg))
    rc = main(["train", "--config", str(cfg_path)])
    assert rc == 0
    return str(out / "best.spmc")


def metrics_table(captured: str):
    lines = captured.strip().splitlines()
    start = lines.index(METRICS_HEADER)
    return lines[start + 1:]


class TestGenData:
    def test_reports_split_sizes(self, dataset, capsys):
        # fixture already ran the command; run again into a new dir
        out = os.path.join(os.path.dirname(dataset), "..", "clids2")
        rc = main(["gen-data", "--out", out, "--cases", "4",
                   "--extents", EXTENTS])
        captured = capsys.readouterr().out
        assert rc == 0
        assert "wrote 4 cases" in captured
        assert "train=3 val=0 test=1" in captured

    @pytest.mark.parametrize("bad", ["8x64", "axbxc", "8x64x64x2"])
    def test_malformed_extents_exit_with_usage_error(self, bad, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["gen-data", "--out", str(tmp_path), "--cases", "1",
                  "--extents", bad])
        assert exc.value.code == 2

    def test_unknown_subcommand_is_a_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["not-a-command"])
        assert exc.value.code == 2


class TestTrain:
    def test_prints_summary_and_checkpoints(self, trained, capsys):
        # the fixture asserted rc == 0; spot-check the artifacts
        assert os.path.exists(trained)
        assert os.path.exists(trained.replace("best.spmc", "last.spmc"))

    def test_missing_config_exits_nonzero(self, capsys):
        rc = main(["train", "--config", "/nonexistent/cfg.json"])
        captured = capsys.readouterr()
        assert rc == 1
        assert captured.err.startswith("error:")


class TestEval:
    def test_prints_csv_and_writes_file(self, trained, dataset, tmp_path,
                                        capsys):
        out_csv = tmp_path / "m.csv"
        rc = main(["eval", "--ckpt", trained, "--manifest", dataset,
                   "--split", "test", "--out", str(out_csv)])
        captured = capsys.readouterr().out
        assert rc == 0
        rows = metrics_table(captured)
        assert len(rows) == 4
        for row in rows:
            epoch, split, cls, dice, hd = row.split(",")
            assert split == "test"
            assert 0.0 <= float(dice) <= 1.0
        assert out_csv.read_text().splitlines()[0] == METRICS_HEADER

    def test_bad_checkpoint_path_exits_nonzero(self, dataset, capsys):
        rc = main(["eval", "--ckpt", "/no/such.spmc", "--manifest", dataset])
        captured = capsys.readouterr()
        assert rc == 1
        assert "error:" in captured.err

    def test_split_choices_are_enforced(self, trained, dataset):
        with pytest.raises(SystemExit) as exc:
            main(["eval", "--ckpt", trained, "--manifest", dataset,
                  "--split", "holdout"])
        assert exc.value.code == 2


class TestExportAttn:
    def test_writes_expected_file_count(self, trained, dataset, tmp_path,
                                        capsys):
        case = os.path.join(os.path.dirname(dataset), "case_0000.vol.spmv")
        rc = main(["export-attn", "--ckpt", trained, "--case", case,
                   "--out", str(tmp_path / "attn")])
        captured = capsys.readouterr().out
        assert rc == 0
        # 3*4*3 PGMs + 6 feature PGMs + 3*4*3 CSVs
        assert "wrote 78 files" in captured
        assert len(os.listdir(tmp_path / "attn")) == 78

    def test_nonexistent_case_exits_nonzero(self, trained, tmp_path, capsys):
        rc = main(["export-attn", "--ckpt", trained, "--case", "/no/x.spmv",
                   "--out", str(tmp_path)])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestBaselines:
    def test_atlas_prints_metrics_table(self, dataset, capsys):
        rc = main(["baseline-atlas", "--manifest", dataset,
                   "--radius", "2", "--temperature", "0"])
        captured = capsys.readouterr().out
        assert rc == 0
        rows = metrics_table(captured)
        assert [r.split(",")[2] for r in rows] == ["1", "2", "3", "mean"]

    def test_gmm_prints_metrics_table(self, dataset, capsys):
        rc = main(["baseline-gmm", "--manifest", dataset,
                   "--components", "4", "--seed", "0"])
        captured = capsys.readouterr().out
        assert rc == 0
        rows = metrics_table(captured)
        assert len(rows) == 4
        dice = [float(r.split(",")[3]) for r in rows]
        assert all(0.0 <= d <= 1.0 for d in dice)

    def test_gmm_separates_the_distinct_tissues(self, dataset, capsys):
        # myocardium and background have unique intensity bands, so the
        # intensity-only baseline should do well on class 2 specifically
        rc = main(["baseline-gmm", "--manifest", dataset])
        captured = capsys.readouterr().out
        assert rc == 0
        row = [r for r in metrics_table(captured)
               if r.split(",")[2] == "2"][0]
        assert float(row.split(",")[3]) > 0.7

    def test_missing_manifest_exits_nonzero(self, capsys):
        rc = main(["baseline-atlas", "--manifest", "/no/manifest.json"])
        assert rc == 1
        assert "error:" in capsys.readouterr().err


class TestGradcheckCommand:
    def test_fast_suite_passes_and_prints_rows(self, capsys):
        rc = main(["gradcheck"])
        captured = capsys.readouterr().out
        assert rc == 0
        assert "30/30 checks passed" in captured
        assert "conv3d[0]" in captured
        assert "[ok]" in captured and "[FAIL]" not in captured

    def test_failures_flip_the_exit_code(self, capsys, monkeypatch):
        from shapeprior.gradcheck import GradCheckResult

        def fake_suite(full=False):
            return [GradCheckResult("x", 1.0, False, 1)], 0.0

        monkeypatch.setattr("shapeprior.cli.check_op_suite", fake_suite)
        rc = main(["gradcheck"])
        captured = capsys.readouterr().out
        assert rc == 1
        assert "0/1 checks passed" in captured
        assert "[FAIL]" in captured


class TestModuleEntryPoint:
    def test_python_dash_m_invocation(self, tmp_path):
        proc = subprocess.run(
            [sys.executable, "-m", "shapeprior", "gen-data",
             "--out", str(tmp_path), "--cases", "1",
             "--extents", "2x16x16"],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        assert "wrote 1 cases" in proc.stdout
        assert (tmp_path / "manifest.json").exists()
