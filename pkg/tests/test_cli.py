import json
from pathlib import Path

import pytest

from egohandid import cli


def _write_cfg(tmp_path, text):
    p = tmp_path / "exp.ini"
    p.write_text(text)
    return str(p)


BASE_CFG = """
[experiment]
seed = 5
output_dir = {out}

[data]
preset = clean
subjects = 2
gestures = 2
repeats = 1
base_length = 6
length_jitter = 1
split = place

[variant]
name = BinaryHand

[model]
arch = tiny3d

[train]
objective = single_subject
batch_size = 4
lr = 0.002
epochs = 2
lr_decay_epoch = 1

[eval]
head = subject
"""


class TestConfig:
    def test_defaults_resolve(self):
        cfg = cli.load_config(None)
        assert cfg.get("train", "batch_size") == 32
        assert cfg.get("train", "lr") == 1e-4
        assert cfg.get("train", "epochs") == 20
        assert cfg.get("train", "lr_decay_epoch") == 10
        assert cfg.get("train", "lr_decay_factor") == 0.1

    def test_unknown_key_rejected_with_path(self, tmp_path):
        p = _write_cfg(tmp_path, "[data]\nfraim_height = 3\n")
        with pytest.raises(cli.ConfigError, match="data.fraim_height"):
            cli.load_config(p)

    def test_unknown_section_rejected(self, tmp_path):
        p = _write_cfg(tmp_path, "[dataz]\npreset = clean\n")
        with pytest.raises(cli.ConfigError, match="dataz"):
            cli.load_config(p)

    def test_bad_value_rejected(self, tmp_path):
        p = _write_cfg(tmp_path, "[train]\nepochs = soon\n")
        with pytest.raises(cli.ConfigError, match="train.epochs"):
            cli.load_config(p)

    def test_set_overrides(self, tmp_path):
        p = _write_cfg(tmp_path, "[train]\nepochs = 3\n")
        cfg = cli.load_config(p, overrides=("train.epochs=9", "variant.name=Depth"))
        assert cfg.get("train", "epochs") == 9
        assert cfg.get("variant", "name") == "Depth"

    def test_bad_override_shape(self):
        with pytest.raises(cli.ConfigError):
            cli.load_config(None, overrides=("epochs=9",))

    def test_unknown_override_key(self):
        with pytest.raises(cli.ConfigError, match="train.epoch"):
            cli.load_config(None, overrides=("train.epoch=9",))

    def test_packaged_presets_load(self):
        for name in ("synthetic-ablation", "egogesture-table1", "adversarial-table3"):
            cfg = cli.load_config(name)
            assert cfg.source.endswith(f"{name}.ini")
        assert cli.load_config("egogesture-table1").get("train", "batch_size") == 32

    def test_missing_config_path(self):
        with pytest.raises(cli.ConfigError, match="not-there"):
            cli.load_config("not-there")

    def test_env_forces_deterministic(self, monkeypatch):
        monkeypatch.setenv(cli.DETERMINISTIC_ENV, "1")
        cfg = cli.load_config(None)
        assert cfg.get("experiment", "deterministic") is True


class TestExitCodes:
    def test_unknown_key_exits_2(self, tmp_path, capsys):
        p = _write_cfg(tmp_path, "[data]\nbogus = 1\n")
        rc = cli.main(["synth", "--config", p])
        assert rc == cli.EXIT_CONFIG
        assert "bogus" in capsys.readouterr().err

    def test_missing_prerequisite_exits_3(self, tmp_path, capsys):
        rc = cli.main(["train", "--set", f"experiment.output_dir={tmp_path}/runs"])
        assert rc == cli.EXIT_MISSING
        assert "synth" in capsys.readouterr().err

    def test_report_without_artifacts_exits_3(self, tmp_path):
        (tmp_path / "emptyrun").mkdir()
        rc = cli.main(["report", "--from", str(tmp_path / "emptyrun"),
                       "--set", f"experiment.output_dir={tmp_path}/runs"])
        assert rc == cli.EXIT_MISSING


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    """One synth + train + eval + verify + cam chain shared by checks below."""
    out = tmp_path_factory.mktemp("cli-runs")
    cfg_path = out / "exp.ini"
    cfg_path.write_text(BASE_CFG.format(out=out / "runs"))
    argv_base = ["--config", str(cfg_path)]
    dirs = {}
    for command in ("synth", "train", "eval", "verify", "cam"):
        rc = cli.main([command] + argv_base)
        assert rc == 0, command
        root = out / "runs" / command
        latest = (root / "latest").read_text().strip()
        dirs[command] = root / latest
    return out, cfg_path, dirs


class TestPipeline:
    def test_artifact_dirs_have_resolved_config_and_checksums(self, pipeline_runs):
        _, _, dirs = pipeline_runs
        for command, run_dir in dirs.items():
            assert (run_dir / "config.resolved.ini").exists(), command
            files = json.loads((run_dir / "files.json").read_text())
            assert "config.resolved.ini" in files
            for rel, digest in files.items():
                assert (run_dir / rel).exists()
                assert len(digest) == 64

    def test_synth_wrote_corpus(self, pipeline_runs):
        _, _, dirs = pipeline_runs
        manifest = dirs["synth"] / "corpus" / "manifest.jsonl"
        assert manifest.exists()
        assert len(manifest.read_text().splitlines()) == 8

    def test_train_wrote_checkpoints_and_losses(self, pipeline_runs):
        _, _, dirs = pipeline_runs
        assert (dirs["train"] / "ckpt.pt").exists()
        assert (dirs["train"] / "ckpt.best.pt").exists()
        assert (dirs["train"] / "loss.csv").exists()

    def test_eval_report_artifacts(self, pipeline_runs):
        _, _, dirs = pipeline_runs
        report = json.loads((dirs["eval"] / "eval_report.json").read_text())
        assert report["head"] == "subject"
        assert 0.0 <= report["overall_accuracy"] <= 1.0
        assert (dirs["eval"] / "per_gesture.csv").exists()
        assert (dirs["eval"] / "strata.csv").exists()
        assert (dirs["eval"] / "length_hist.png").exists()

    def test_verify_report_artifacts(self, pipeline_runs):
        _, _, dirs = pipeline_runs
        report = json.loads((dirs["verify"] / "verification.json").read_text())
        assert 0.0 <= report["eer"] <= 1.0
        assert report["num_pairs"] > 0
        assert (dirs["verify"] / "roc.png").exists()

    def test_cam_artifacts(self, pipeline_runs):
        _, _, dirs = pipeline_runs
        data = json.loads((dirs["cam"] / "cam.json").read_text())
        assert "peak_distance_px" in data
        assert (dirs["cam"] / "cam.png").exists()

    def test_report_command_renders_from_previous_runs(self, pipeline_runs):
        out, cfg_path, dirs = pipeline_runs
        rc = cli.main(["report", "--config", str(cfg_path), "--from", str(dirs["verify"])])
        assert rc == 0
        root = out / "runs" / "report"
        latest = (root / "latest").read_text().strip()
        assert (root / latest / "roc.png").exists()

    def test_eval_rejects_wrong_channel_checkpoint(self, pipeline_runs, capsys):
        _, cfg_path, _ = pipeline_runs
        rc = cli.main(["eval", "--config", str(cfg_path), "--set", "variant.name=ColorHand"])
        assert rc == cli.EXIT_CONFIG
        assert "channels" in capsys.readouterr().err


class TestSynthDeterminism:
    def test_identical_config_identical_checksums(self, tmp_path):
        cfg_path = tmp_path / "exp.ini"
        cfg_path.write_text(BASE_CFG.format(out=tmp_path / "runs"))
        assert cli.main(["synth", "--config", str(cfg_path)]) == 0
        assert cli.main(["synth", "--config", str(cfg_path)]) == 0
        root = tmp_path / "runs" / "synth"
        run_dirs = sorted(d for d in root.iterdir() if d.is_dir())
        assert len(run_dirs) == 2
        a = json.loads((run_dirs[0] / "files.json").read_text())
        b = json.loads((run_dirs[1] / "files.json").read_text())
        assert a == b
