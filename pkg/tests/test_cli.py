import json
import os
from pathlib import Path

import pytest

from coftad.cli import main, run_pipeline
from coftad.config import load_run_config, validate_config
from coftad.errors import ConfigError

MINIMAL = """
seed = 3

[dataset]
mode = "synth"
k = 3
reserve_normal = 8
reserve_abnormal = 8

[dataset.synth]
n_normal = 12
n_abnormal = 8
image_size = 16

[encoder]
backbone_arch = "tiny"
input_size = 16
feature_dim = 8
projector_hidden_dim = 16
projector_out_dim = 4
predictor_hidden_dim = 16

[train]
batch_size = 8
steps = 2
"""


def write_config(tmp_path: Path, text: str = MINIMAL, name: str = "cfg.toml") -> Path:
    path = tmp_path / name
    path.write_text(text)
    return path


class TestValidateConfig:
    def test_defaults_only_config_is_clean(self, tmp_path):
        path = write_config(tmp_path, "")
        assert validate_config(path) == []

    def test_range_violation_named(self, tmp_path):
        path = write_config(tmp_path, MINIMAL + "\nlambda_pp = -1.0\n")
        # lambda_pp belongs under [train]; as a top-level key it is unknown
        diags = validate_config(path)
        assert any("lambda_pp" in d.key for d in diags)

        path2 = write_config(tmp_path, MINIMAL.replace("[train]", "[train]\nlambda_pp = -1.0"), "cfg2.toml")
        diags2 = validate_config(path2)
        assert any(d.severity == "error" and "lambda_pp" in d.message for d in diags2)

    def test_unknown_key_gets_suggestion(self, tmp_path):
        path = write_config(tmp_path, MINIMAL.replace("[train]", "[train]\nlamda_pp = 0.5"))
        diags = validate_config(path)
        unknown = [d for d in diags if "unknown key" in d.message]
        assert unknown and "lambda_pp" in unknown[0].message

    def test_unparseable_file_reports_location(self, tmp_path):
        path = write_config(tmp_path, "seed = = 3")
        with pytest.raises(ConfigError, match="parse"):
            validate_config(path)

    def test_k_zero_fails_validation(self, tmp_path):
        path = write_config(tmp_path, MINIMAL.replace("k = 3", "k = 0"))
        diags = validate_config(path)
        assert any(d.severity == "error" and "k" in d.message for d in diags)

    def test_validate_subcommand_exit_codes(self, tmp_path, capsys):
        good = write_config(tmp_path, MINIMAL)
        assert main(["validate", "--config", str(good)]) == 0
        bad = write_config(tmp_path, MINIMAL.replace("k = 3", "k = 0"), "bad.toml")
        assert main(["validate", "--config", str(bad)]) == 2

    def test_folder_mode_requires_existing_root(self, tmp_path):
        text = MINIMAL.replace('mode = "synth"', 'mode = "folder"\nroot = "missing-data"')
        path = write_config(tmp_path, text)
        diags = validate_config(path)
        assert any(d.key == "dataset.root" and d.severity == "error" for d in diags)

    def test_env_seed_overrides_config(self, tmp_path, monkeypatch):
        path = write_config(tmp_path)
        monkeypatch.setenv("COFTAD_SEED", "99")
        config = load_run_config(path)
        assert config.seed == 99
        assert config.train.seed == 99
        monkeypatch.delenv("COFTAD_SEED")
        assert load_run_config(path).seed == 3


@pytest.mark.slow
class TestPipeline:
    def test_run_produces_report_with_auroc(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert "auroc" in report and 0.0 <= report["auroc"] <= 1.0
        manifest = json.loads((out / "manifest.json").read_text())
        assert set(manifest["stages"]) == {"dataset", "split", "train", "density", "eval"}
        assert all(s["status"] == "ok" for s in manifest["stages"].values())
        for name in ("split.json", "checkpoint.pt", "train_log.csv", "density.bin", "scores.csv", "hist.png"):
            assert (out / name).exists(), name

    def test_rerun_with_same_seed_is_identical(self, tmp_path):
        cfg = write_config(tmp_path)
        run_pipeline(cfg, tmp_path / "a")
        run_pipeline(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "report.json").read_text() == (tmp_path / "b" / "report.json").read_text()
        assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "b" / "train_log.csv").read_text()

    def test_k_zero_rejected_before_any_compute(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL.replace("k = 3", "k = 0"))
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 2
        assert not out.exists()

    def test_writes_stay_inside_out_dir(self, tmp_path, monkeypatch):
        workdir = tmp_path / "cwd"
        workdir.mkdir()
        monkeypatch.chdir(workdir)
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
        assert list(workdir.iterdir()) == []

    def test_score_and_eval_subcommands_reuse_artifacts(self, tmp_path):
        cfg = write_config(tmp_path)
        out = tmp_path / "run"
        run_pipeline(cfg, out)

        scores_out = tmp_path / "rescore" / "scores.csv"
        code = main(
            [
                "score",
                "--model",
                str(out / "density.bin"),
                "--checkpoint",
                str(out / "checkpoint.pt"),
                "--images",
                str(out / "dataset" / "abnormal"),
                "--out",
                str(scores_out),
            ]
        )
        assert code == 0
        header = scores_out.read_text().splitlines()[0]
        assert header == "id,raw_score,percentile"

        eval_out = tmp_path / "re-eval"
        code = main(
            [
                "eval",
                "--checkpoint",
                str(out / "checkpoint.pt"),
                "--density",
                str(out / "density.bin"),
                "--split",
                str(out / "split.json"),
                "--out",
                str(eval_out),
            ]
        )
        assert code == 0
        assert (eval_out / "report.json").read_text() == (out / "report.json").read_text()

    def test_knn_scorer_pipeline(self, tmp_path):
        cfg = write_config(tmp_path, MINIMAL + '\n[density]\nscorer = "knn"\nk_nn = 3\n')
        out = tmp_path / "run"
        run_pipeline(cfg, out)
        report = json.loads((out / "report.json").read_text())
        assert report["config_echo"]["scorer"] == "knn"

    def test_stage_error_recorded_in_manifest(self, tmp_path):
        # reserve more test images than the synthetic dataset provides
        cfg = write_config(tmp_path, MINIMAL.replace("reserve_normal = 8", "reserve_normal = 500"))
        out = tmp_path / "run"
        assert main(["run", "--config", str(cfg), "--out", str(out)]) == 3
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["stages"]["split"]["status"] == "error"

    def test_env_seed_changes_artifacts(self, tmp_path, monkeypatch):
        cfg = write_config(tmp_path)
        run_pipeline(cfg, tmp_path / "a")
        monkeypatch.setenv("COFTAD_SEED", "404")
        run_pipeline(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "train_log.csv").read_text() != (tmp_path / "b" / "train_log.csv").read_text()


class TestShippedDemoConfig:
    def test_demo_config_validates_clean(self):
        demo = Path(__file__).resolve().parents[1] / "configs" / "demo.toml"
        assert demo.exists()
        assert [d for d in validate_config(demo) if d.severity == "error"] == []
