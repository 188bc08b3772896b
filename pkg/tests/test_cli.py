import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from mogref.cli import EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_VALIDATION, main
from mogref.metrics import EvalResult
from mogref.model import SCSModel

TINY_MODEL_FLAGS = [
    "--model-dim", "8", "--num-heads", "2", "--sce-blocks", "1",
    "--num-queries", "2", "--ffn-dim", "12", "--image-size", "16",
    "--patch-size", "8", "--distractors", "1",
]


def read_csv_rows(path: Path):
    lines = [l for l in path.read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


def comments_of(path: Path):
    return [l for l in path.read_text().splitlines() if l.startswith("#")]


class TestGradcheckCommand:
    def test_writes_valid_json_and_passes(self, tmp_path):
        # a fast subset here; the acceptance suite runs the full registry
        code = main(["gradcheck", "--only", "matmul,mog_forward,match_and_loss",
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_OK
        doc = json.loads((tmp_path / "gradcheck.json").read_text())
        assert doc["schema_version"] == 1
        assert doc["all_passed"] is True
        assert "run_config" in doc
        assert {r["op"] for r in doc["results"]} == {"matmul", "mog_forward", "match_and_loss"}

    def test_fault_injection_fails_with_named_op(self, tmp_path):
        code = main(["gradcheck", "--fault-inject", "gelu", "--only", "gelu,sigmoid",
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_NUMERICAL
        doc = json.loads((tmp_path / "gradcheck.json").read_text())
        failed = [r["op"] for r in doc["results"] if not r["passed"]]
        assert failed == ["gelu"]


class TestMakeDataAndStats:
    def test_make_data_then_stats(self, tmp_path):
        data_dir = tmp_path / "data"
        code = main(["make-data", "--scenes", "5", "--seed", "3", "--image-size", "16",
                     "--distractors", "1", "--ppm", "--out-dir", str(data_dir)])
        assert code == EXIT_OK
        assert (data_dir / "annotations.json").exists()
        assert len(list((data_dir / "images").glob("*.ppm"))) == 5

        stats_dir = tmp_path / "stats"
        code = main(["stats", "--data", str(data_dir / "annotations.json"),
                     "--out-dir", str(stats_dir)])
        assert code == EXIT_OK
        doc = json.loads((stats_dir / "stats.json").read_text())
        assert doc["stats"]["bbox_count"] == 5
        header = comments_of(stats_dir / "stats.csv")
        assert any("o2s" in line for line in header)  # definitions documented

    def test_stats_matches_bundled_expected_file(self, tmp_path, fixtures_dir):
        code = main(["stats", "--data", str(fixtures_dir / "annotations_fixture.json"),
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_OK
        emitted = json.loads((tmp_path / "stats.json").read_text())["stats"]
        expected = json.loads((fixtures_dir / "expected_stats.json").read_text())
        assert emitted == expected

    def test_stats_on_malformed_file_exits_validation(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text('{"schema_version": 1, "records": [{"image_id": "x"}]}')
        assert main(["stats", "--data", str(bad), "--out-dir", str(tmp_path)]) == EXIT_VALIDATION

    def test_stats_missing_file_exits_io(self, tmp_path):
        assert main(["stats", "--data", str(tmp_path / "nope.json"),
                     "--out-dir", str(tmp_path)]) == EXIT_IO

    def test_stats_on_empty_record_list_is_error_not_empty_stats(self, tmp_path):
        empty = tmp_path / "empty.json"
        empty.write_text('{"schema_version": 1, "records": []}')
        assert main(["stats", "--data", str(empty),
                     "--out-dir", str(tmp_path)]) == EXIT_VALIDATION
        assert not (tmp_path / "stats.json").exists()


class TestTrainEval:
    def test_zero_step_train_writes_init_checkpoint(self, tmp_path):
        code = main(["train", "--steps", "0", "--scenes", "2", "--seed", "1",
                     *TINY_MODEL_FLAGS, "--out-dir", str(tmp_path)])
        assert code == EXIT_OK
        ckpt = SCSModel.load(tmp_path / "checkpoint.json")
        from mogref.data import default_vocab
        from mogref.model import ModelConfig
        from mogref.rng import RngState

        fresh = SCSModel(ckpt.config, default_vocab(), RngState(1))
        for a, b in zip(ckpt.parameters(), fresh.parameters()):
            assert (a.data == b.data).all(), a.name

    def test_short_train_then_eval_round_trip(self, tmp_path):
        train_dir = tmp_path / "train"
        code = main(["train", "--steps", "6", "--scenes", "2", "--seed", "2",
                     "--batch-size", "2", "--eval-every", "3", "--target-p50", "0",
                     *TINY_MODEL_FLAGS, "--out-dir", str(train_dir)])
        assert code == EXIT_OK
        log_rows = read_csv_rows(train_dir / "train_log.csv")
        assert [int(r["step"]) for r in log_rows] == [1, 2, 3, 4, 5, 6]
        summary = json.loads((train_dir / "train_summary.json").read_text())
        assert summary["steps_run"] == 6

        eval_dir = tmp_path / "eval"
        code = main(["eval", "--checkpoint", str(train_dir / "checkpoint.json"),
                     "--scenes", "2", "--seed", "2", "--image-size", "16",
                     "--distractors", "1", "--out-dir", str(eval_dir)])
        assert code == EXIT_OK
        doc = json.loads((eval_dir / "eval.json").read_text())
        parsed = EvalResult.from_json(doc["eval"])
        assert parsed.count == 2
        rows = read_csv_rows(eval_dir / "eval.csv")
        assert set(rows[0]) == {"P@0.5", "P@0.6", "P@0.7", "P@0.8", "mP", "count"}
        # CSV and JSON agree losslessly
        assert float(rows[0]["mP"]) == parsed.mp

    def test_train_determinism_across_runs(self, tmp_path):
        args = ["train", "--steps", "5", "--scenes", "2", "--seed", "9",
                "--batch-size", "2", "--eval-every", "0", *TINY_MODEL_FLAGS]
        main([*args, "--out-dir", str(tmp_path / "a")])
        main([*args, "--out-dir", str(tmp_path / "b")])
        log_a = (tmp_path / "a" / "train_log.csv").read_text()
        log_b = (tmp_path / "b" / "train_log.csv").read_text()
        # identical up to the echoed out-dir in the header
        strip = lambda s: [l for l in s.splitlines() if not l.startswith("#")]
        assert strip(log_a) == strip(log_b)

    def test_eval_checkpoint_config_mismatch(self, tmp_path):
        main(["train", "--steps", "0", "--scenes", "1", "--seed", "1",
              *TINY_MODEL_FLAGS, "--out-dir", str(tmp_path)])
        # evaluate against data generated at a different raster size
        code = main(["eval", "--checkpoint", str(tmp_path / "checkpoint.json"),
                     "--scenes", "1", "--seed", "1", "--image-size", "32",
                     "--distractors", "1", "--out-dir", str(tmp_path)])
        assert code == EXIT_VALIDATION

    def test_eval_missing_checkpoint_exits_io(self, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.json"),
                     "--out-dir", str(tmp_path)]) == EXIT_IO

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # divergence path
    def test_divergent_training_exits_numerical(self, tmp_path):
        code = main(["train", "--steps", "200", "--scenes", "2", "--seed", "1",
                     "--lr", "1e8", "--batch-size", "2", "--eval-every", "0",
                     "--target-p50", "0", *TINY_MODEL_FLAGS,
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_NUMERICAL

    def test_train_from_dataset_dir(self, tmp_path):
        data_dir = tmp_path / "data"
        main(["make-data", "--scenes", "2", "--seed", "4", "--image-size", "16",
              "--distractors", "1", "--ppm", "--out-dir", str(data_dir)])
        code = main(["train", "--steps", "2", "--data", str(data_dir),
                     "--eval-every", "0", *TINY_MODEL_FLAGS,
                     "--out-dir", str(tmp_path / "run")])
        assert code == EXIT_OK


class TestSweep:
    def test_two_row_sweep_table(self, tmp_path):
        code = main(["sweep", "--gmax", "2", "--steps", "2", "--scenes", "2",
                     "--eval-scenes", "2", "--seed", "0", *TINY_MODEL_FLAGS,
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_OK
        rows = read_csv_rows(tmp_path / "sweep.csv")
        assert len(rows) == 2
        assert list(rows[0]) == ["Granularity", "P@0.5", "P@0.6", "P@0.7", "P@0.8", "mP"]
        assert [r["Granularity"] for r in rows] == ["1", "2"]
        doc = json.loads((tmp_path / "sweep.json").read_text())
        assert "full_scale_reference" in doc
        assert doc["rows"][0]["granularity"] == 1

    def test_single_row_sweep(self, tmp_path):
        code = main(["sweep", "--gmax", "1", "--steps", "1", "--scenes", "1",
                     "--eval-scenes", "1", "--seed", "0", *TINY_MODEL_FLAGS,
                     "--out-dir", str(tmp_path)])
        assert code == EXIT_OK
        assert len(read_csv_rows(tmp_path / "sweep.csv")) == 1


class TestEntryPoints:
    def test_module_help(self):
        proc = subprocess.run([sys.executable, "-m", "mogref.cli", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0
        assert "gradcheck" in proc.stdout and "sweep" in proc.stdout

    def test_out_dir_env_var(self, tmp_path, monkeypatch, fixtures_dir):
        monkeypatch.setenv("MOGREF_OUT_DIR", str(tmp_path / "envout"))
        code = main(["stats", "--data", str(fixtures_dir / "annotations_fixture.json")])
        assert code == EXIT_OK
        assert (tmp_path / "envout" / "stats.json").exists()

    def test_artifacts_embed_run_config(self, tmp_path, fixtures_dir):
        main(["stats", "--data", str(fixtures_dir / "annotations_fixture.json"),
              "--out-dir", str(tmp_path)])
        doc = json.loads((tmp_path / "stats.json").read_text())
        assert doc["run_config"]["data"].endswith("annotations_fixture.json")
        assert doc["schema_version"] == 1
