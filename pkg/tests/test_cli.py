"""
Tests for the command-line entry point and the configuration layer behind it.
"""

from pathlib import Path

import pytest

from cli import main
from agra.benchmark import read_artifact_csv
from agra.config import build_config, config_hash, dump_config, load_run_config
from agra.errors import ConfigError


@pytest.fixture
def config_file(cfg, tmp_path) -> Path:
    return dump_config(cfg, tmp_path / "run.yaml")


class TestConfig:
    def test_round_trip(self, cfg, config_file):
        reloaded = load_run_config(config_file)
        assert reloaded == cfg
        assert config_hash(reloaded) == config_hash(cfg)

    def test_overrides(self, config_file):
        cfg = load_run_config(config_file, ["train.stage2_epochs=3", "graph.mode=single", "protocol.methods=[dt]"])
        assert cfg.train.stage2_epochs == 3
        assert cfg.graph.mode == "single"
        assert cfg.protocol.methods == ["dt"]

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            build_config({"train": {"epochs": 3}})

    def test_bad_override(self):
        with pytest.raises(ConfigError):
            build_config({}, ["train.lr"])

    def test_hash_tracks_content(self, cfg):
        assert config_hash(cfg) != config_hash(cfg.model_copy(update={"seed": 1}))
        assert len(config_hash(cfg)) == 12


class TestCommands:
    def test_train_stage1_only(self, cfg, config_file):
        assert main(["train", "--config", str(config_file), "--stage", "1"]) == 0
        out = Path(cfg.output_dir)
        assert (out / "stage1.pt").exists()
        assert not (out / "stage2.pt").exists()
        assert load_run_config(out / "config.yaml") == cfg

    def test_train_both_stages_then_diagnostics(self, cfg, config_file, tmp_path):
        assert main(["train", "--config", str(config_file)]) == 0
        out = Path(cfg.output_dir)
        assert (out / "stage2.pt").exists() and (out / "bank.pt").exists()

        assert main(["mmd", "--config", str(config_file)]) == 0
        mmd = read_artifact_csv(out / "mmd.csv")
        assert len(mmd) == len(cfg.protocol.targets) * 4
        assert set(mmd["mode"]) == {"BH", "BL", "BHL", "AGRA"}

        dump = tmp_path / "feats.csv"
        assert main(["dump-features", "--config", str(config_file), "--out", str(dump)]) == 0
        assert len(read_artifact_csv(dump)) == 50

    def test_missing_source_manifest(self, cfg, config_file, tmp_path):
        code = main(["train", "--config", str(config_file), "--stage", "1",
                     "--set", f"protocol.manifests.toy_source={tmp_path / 'absent.jsonl'}"])
        assert code == 1
        assert not (Path(cfg.output_dir) / "stage1.pt").exists()

    def test_invalid_config_exits_1(self, config_file):
        assert main(["bench", "--config", str(config_file), "--set", "graph.colour=red"]) == 1

    def test_missing_checkpoint_exits_2(self, config_file):
        assert main(["mmd", "--config", str(config_file)]) == 2

    def test_bench_prints_table(self, config_file, capsys):
        assert main(["bench", "--config", str(config_file), "--set", "protocol.methods=[dt]"]) == 0
        out = capsys.readouterr().out
        assert "| Method" in out and "toy_target" in out and "Mean" in out

    def test_make_toy_data(self, tmp_path):
        out = tmp_path / "toy"
        assert main(["make-toy-data", "--out", str(out), "--n-source", "14", "--n-target", "7"]) == 0
        cfg = load_run_config(out / "toy.yaml")
        assert set(cfg.protocol.manifests) == {"toy_source", "toy_target"}
        assert Path(cfg.protocol.manifests["toy_target"]).read_text().count("\n") == 7
