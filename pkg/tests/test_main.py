import csv
import json

import numpy as np
import pytest
import torch

from data import load_mask, load_volume
from helpers.manifest import MANIFEST_NAME, read_manifest
from main import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, main
from train import load_checkpoint
from warp import DeformationField, grid_sample

DESK_CONFIG = """\
network.in_shape = 32, 32, 32
train.steps_per_stage = 1
train.learning_rate = 1e-3
train.log_every = 0
synth.shape = 32, 32, 32
synth.max_displacement = 4
grid.alpha = 1, 10
grid.beta = 10, 100
"""


@pytest.fixture(autouse=True)
def clean_environment(monkeypatch):
    for name in ("REFINEREG_DEVICE", "REFINEREG_SEED", "REFINEREG_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Two synthetic pairs and a model trained on them."""
    root = tmp_path_factory.mktemp("cli")
    config = root / "desk.cfg"
    config.write_text(DESK_CONFIG)
    assert main(["synth", "--config", str(config), "--count", "2", "--out", str(root / "synth")]) == EXIT_OK
    assert main(["train", "--config", str(config), "--data", str(root / "synth"), "--out", str(root / "train")]) == EXIT_OK
    return root


def read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


class TestSynth:
    def test_writes_one_pair(self, tmp_path):
        code = main(["synth", "--count", "1", "--seed", "4", "--out", str(tmp_path)])
        assert code == EXIT_OK
        names = {p.name for p in tmp_path.iterdir()}
        for name in ("phantom_0.raw", "phantom_0_mask.raw", "deformed_0.raw", "field_0.field", MANIFEST_NAME):
            assert name in names
        manifest = read_manifest(tmp_path / MANIFEST_NAME)
        assert (manifest.command, manifest.seed, manifest.status) == ("synth", 4, "ok")

    def test_same_seed_same_bytes(self, tmp_path):
        for run in ("a", "b"):
            assert main(["synth", "--count", "2", "--seed", "9", "--out", str(tmp_path / run)]) == EXIT_OK
        data_files = sorted(p.name for p in (tmp_path / "a").iterdir() if p.name != MANIFEST_NAME)
        assert data_files
        for name in data_files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

    def test_deformed_matches_sampler(self, tmp_path):
        assert main(["synth", "--count", "1", "--out", str(tmp_path)]) == EXIT_OK
        phantom = load_volume(tmp_path / "phantom_0.raw")
        field = DeformationField.load(tmp_path / "field_0.field")
        deformed = load_volume(tmp_path / "deformed_0.raw")
        expected = grid_sample(phantom.to_tensor(), field.tensor)[0, 0].numpy()
        np.testing.assert_allclose(deformed.data, expected, atol=1e-6)
        assert set(np.unique(load_mask(tmp_path / "phantom_0_mask.raw").data)) == {0, 1, 2, 3, 4}

    def test_count_must_be_positive(self, tmp_path):
        assert main(["synth", "--count", "0", "--out", str(tmp_path)]) == EXIT_USAGE


class TestTrain:
    def test_outputs(self, workspace):
        out = workspace / "train"
        ckpt = load_checkpoint(out / "checkpoint.pt")
        assert ckpt.step == 5
        assert len(read_rows(out / "loss_history.csv")) == 5
        manifest = json.loads((out / MANIFEST_NAME).read_text())
        assert manifest["status"] == "ok"
        assert manifest["outputs"]["checkpoint"].endswith("checkpoint.pt")
        assert manifest["config"]["train"]["network"]["in_shape"] == [32, 32, 32]

    def test_missing_data_dir(self, tmp_path, capsys):
        missing = tmp_path / "nowhere"
        assert main(["train", "--data", str(missing), "--out", str(tmp_path / "out")]) == EXIT_DATA
        assert str(missing) in capsys.readouterr().err
        assert read_manifest(tmp_path / "out" / MANIFEST_NAME).status == "data error"

    def test_bad_config(self, tmp_path, workspace):
        config = tmp_path / "bad.cfg"
        config.write_text("train.learning_rate = fast\n")
        args = ["train", "--config", str(config), "--data", str(workspace / "synth"), "--out", str(tmp_path)]
        assert main(args) == EXIT_USAGE

    def test_settings_group_key_is_a_config_error(self, tmp_path, workspace, capsys):
        config = tmp_path / "group.cfg"
        config.write_text("train.network = small\n")
        args = ["train", "--config", str(config), "--data", str(workspace / "synth"), "--out", str(tmp_path)]
        assert main(args) == EXIT_USAGE
        assert "train.network" in capsys.readouterr().err


class TestRegister:
    def test_writes_field_and_warped(self, workspace, tmp_path):
        out = tmp_path / "reg"
        args = [
            "register", "--checkpoint", str(workspace / "train" / "checkpoint.pt"),
            "--fixed", str(workspace / "synth" / "deformed_0.raw"),
            "--moving", str(workspace / "synth" / "phantom_0.raw"),
            "--overlay", "--out", str(out),
        ]
        assert main(args) == EXIT_OK
        field = DeformationField.load(out / "field.field")
        assert field.shape == (32, 32, 32)
        assert load_volume(out / "warped.raw").shape == (32, 32, 32)
        assert (out / "overlay.png").exists() and (out / "stages.png").exists()

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        broken = tmp_path / "broken.pt"
        broken.write_bytes(b"not a checkpoint")
        args = [
            "register", "--checkpoint", str(broken),
            "--fixed", str(workspace / "synth" / "deformed_0.raw"),
            "--moving", str(workspace / "synth" / "phantom_0.raw"),
            "--out", str(tmp_path / "reg"),
        ]
        assert main(args) != EXIT_OK


class TestEvaluate:
    def run(self, workspace, out):
        args = [
            "evaluate", "--checkpoint", str(workspace / "train" / "checkpoint.pt"),
            "--data", str(workspace / "synth"), "--no-timing", "--out", str(out),
        ]
        assert main(args) == EXIT_OK
        return out / "metrics.csv"

    def test_one_row_per_pair(self, workspace, tmp_path, capsys):
        rows = read_rows(self.run(workspace, tmp_path))
        assert len(rows) == 2
        assert [r["fixed_id"] for r in rows] == ["deformed_0", "deformed_1"]
        for row in rows:
            organs = [float(row[f"dice_{n}"]) for n in ("heart", "aorta", "trachea", "esophagus")]
            assert float(row["dice_mean"]) == pytest.approx(sum(organs) / 4)
            assert row["time_sec"] == "nan"
        assert "Mean Dice:" in capsys.readouterr().out

    def test_repeated_run_is_identical(self, workspace, tmp_path):
        first = self.run(workspace, tmp_path / "a").read_bytes()
        second = self.run(workspace, tmp_path / "b").read_bytes()
        assert first == second

    def test_missing_masks_listed(self, workspace, tmp_path, capsys):
        data = tmp_path / "data"
        data.mkdir()
        for source in (workspace / "synth").iterdir():
            if "_mask" not in source.name and source.name != MANIFEST_NAME:
                (data / source.name).write_bytes(source.read_bytes())
        args = [
            "evaluate", "--checkpoint", str(workspace / "train" / "checkpoint.pt"),
            "--data", str(data), "--out", str(tmp_path / "out"),
        ]
        assert main(args) == EXIT_DATA
        assert "phantom_0_mask" in capsys.readouterr().err


class TestGridSearch:
    def test_two_by_two(self, workspace, tmp_path):
        args = [
            "gridsearch", "--config", str(workspace / "desk.cfg"),
            "--data", str(workspace / "synth"), "--out", str(tmp_path),
        ]
        assert main(args) == EXIT_OK
        rows = read_rows(tmp_path / "grid.csv")
        assert [(float(r["alpha"]), float(r["beta"])) for r in rows] == [(1, 10), (1, 100), (10, 10), (10, 100)]
        assert all(r["status"] == "ok" for r in rows)


class TestParser:
    @pytest.mark.parametrize("command", [[], ["train"], ["register"], ["evaluate"], ["synth"], ["gridsearch"]])
    def test_help_exits_zero(self, command, capsys):
        with pytest.raises(SystemExit) as excinfo:
            build_parser().parse_args(command + ["--help"])
        assert excinfo.value.code == 0
        if command:
            assert "--seed" in capsys.readouterr().out

    def test_defaults_in_help(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["synth", "--help"])
        assert "default: 1" in capsys.readouterr().out

    def test_unknown_flag_exits_one(self):
        with pytest.raises(SystemExit) as excinfo:
            main(["synth", "--bogus"])
        assert excinfo.value.code == EXIT_USAGE

    def test_missing_command_exits_one(self):
        with pytest.raises(SystemExit) as excinfo:
            main([])
        assert excinfo.value.code == EXIT_USAGE

    def test_seed_flag_reaches_training(self, workspace, tmp_path):
        args = [
            "train", "--config", str(workspace / "desk.cfg"), "--data", str(workspace / "synth"),
            "--seed", "5", "--out", str(tmp_path),
        ]
        assert main(args) == EXIT_OK
        assert read_manifest(tmp_path / MANIFEST_NAME).seed == 5
        assert not torch.equal(
            load_checkpoint(tmp_path / "checkpoint.pt").model_state["coarse_head.1.weight"],
            load_checkpoint(workspace / "train" / "checkpoint.pt").model_state["coarse_head.1.weight"],
        )
