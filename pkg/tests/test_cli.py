import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

from recvarnet.cli import main
from recvarnet.config import load_config, model_config, train_config
from recvarnet.data import read_volume
from recvarnet.evaluation import evaluate_dataset, model_reconstructor, zero_filled_reconstructor
from recvarnet.model import ModelConfig, RecurrentVarNet
from recvarnet.operators import ifft2c, rss
from recvarnet.training import capture, load_checkpoint, model_from_checkpoint, save_checkpoint

TINY = """\
seed: 7
data:
  shape: [32, 32]
  n_coils: 2
  slices_per_volume: 2
model:
  time_steps: 2
  recurrent_layers: 1
  hidden_channels: 4
  rsi_filters: [4, 4, 4, 4]
  ser_filters: [4, 4, 4, 4]
train:
  batch_size: 1
  warmup_iters: 2
  validate_every: 1
  checkpoint_every: 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.yaml").write_text(TINY)
    assert main(["generate-data", "--config", str(root / "tiny.yaml"), "--out", str(root / "data")]) == 0
    return root


def run(workspace, *args):
    return main([args[0], "--config", str(workspace / "tiny.yaml"), *args[1:]])


def zero_weight_checkpoint(path, config=None):
    model = RecurrentVarNet(config or ModelConfig(time_steps=2, recurrent_layers=1, hidden_channels=4))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.step_sizes.fill_(1.0)
    save_checkpoint(path, capture(model, None, 0))
    return path


class TestGenerateData:
    def test_summary_matches_manifest(self, workspace, capsys):
        assert run(workspace, "generate-data", "--out", str(workspace / "again")) == 0
        out = capsys.readouterr().out
        manifest = json.loads((workspace / "again" / "manifest.json").read_text())
        assert "volumes: 6 (train 4, val 1, test 1)" in out
        assert f"slices: {sum(v['slices'] for v in manifest['volumes'])};" in out

    def test_prints_resolved_config_first(self, workspace, capsys):
        run(workspace, "generate-data", "--out", str(workspace / "again"))
        lines = capsys.readouterr().out.splitlines()
        assert lines[0] == "# resolved config"
        assert "model.time_steps: 2" in lines and "seed: 7" in lines

    def test_rerun_identical(self, workspace):
        run(workspace, "generate-data", "--out", str(workspace / "again"))
        for f in sorted((workspace / "data").iterdir()):
            assert f.read_bytes() == (workspace / "again" / f.name).read_bytes()

    def test_seed_flag_changes_data(self, workspace):
        run(workspace, "generate-data", "--seed", "8", "--out", str(workspace / "other"))
        assert (workspace / "data" / "volume_000.kspv").read_bytes() != (workspace / "other" / "volume_000.kspv").read_bytes()


class TestConfigErrors:
    def test_unknown_key_lists_valid_keys(self, workspace, capsys):
        code = run(workspace, "generate-data", "--set", "model.bogus=1", "--out", str(workspace / "x"))
        err = capsys.readouterr().err
        assert code == 1 and "model.bogus" in err and "model.time_steps" in err

    def test_missing_seed(self, tmp_path, capsys):
        assert main(["generate-data", "--out", str(tmp_path)]) == 1
        assert "seed" in capsys.readouterr().err

    def test_bad_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["train", "--no-such-flag"])
        assert exc.value.code == 1

    def test_missing_data_is_runtime_error(self, workspace, tmp_path):
        assert run(workspace, "train", "--manifest", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o")) == 2

    def test_invalid_value(self, workspace, tmp_path):
        assert run(workspace, "train", "--set", "model.time_steps=0", "--out", str(tmp_path / "o")) == 1


class TestTrain:
    def test_zero_iterations(self, workspace, tmp_path):
        code = run(workspace, "train", "--manifest", str(workspace / "data"), "--total-iters", "0", "--out", str(tmp_path))
        assert code == 0 and (tmp_path / "latest.ckpt").exists()
        assert load_checkpoint(tmp_path / "latest.ckpt").iteration == 0

    @pytest.mark.parametrize(
        "flags, check",
        [
            (["--no-ser"], lambda c: not c["use_ser"]),
            (["--no-rsi"], lambda c: not c["use_rsi"]),
            (["--share-weights"], lambda c: c["share_weights"]),
            (["--time-steps", "11", "--recurrent-layers", "3"], lambda c: c["time_steps"] == 11 and c["recurrent_layers"] == 3),
        ],
    )
    def test_ablation_flags(self, workspace, tmp_path, flags, check):
        code = run(workspace, "train", "--manifest", str(workspace / "data"), "--total-iters", "1", "--out", str(tmp_path), *flags)
        record = load_checkpoint(tmp_path / "latest.ckpt")
        assert code == 0 and record.iteration == 1 and check(record.model_config)

    def test_resume_and_curve(self, workspace, tmp_path):
        args = ["train", "--manifest", str(workspace / "data"), "--out", str(tmp_path)]
        assert run(workspace, *args, "--total-iters", "1") == 0
        assert run(workspace, *args, "--total-iters", "2", "--resume") == 0
        assert load_checkpoint(tmp_path / "latest.ckpt").iteration == 2
        assert (tmp_path / "training_curve.png").stat().st_size > 0
        rows = (tmp_path / "metrics.tsv").read_text().splitlines()
        assert [r.split("\t")[0] for r in rows[1:]] == ["1", "2"]


class TestReconstruct:
    def test_full_sampling_zero_weights(self, workspace, tmp_path):
        ckpt = zero_weight_checkpoint(tmp_path / "zero.ckpt")
        source = workspace / "data" / "volume_000.kspv"
        code = run(
            workspace, "reconstruct", "--checkpoint", str(ckpt), "--input", str(source),
            "--acceleration", "1", "--out", str(tmp_path / "r.kspv"),
        )  # fmt: skip
        assert code == 0
        recon = read_volume(tmp_path / "r.kspv").data
        reference = rss(ifft2c(torch.from_numpy(read_volume(source).data))).numpy()
        assert recon.shape == reference.shape and np.abs(recon - reference).max() < 1e-5

    def test_deterministic_with_pngs(self, workspace, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        torch.manual_seed(0)
        save_checkpoint(ckpt, capture(RecurrentVarNet(ModelConfig(time_steps=2, recurrent_layers=1, hidden_channels=4)), None, 0))
        source = str(workspace / "data" / "volume_001.kspv")
        for name in ("a", "b"):
            run(
                workspace, "reconstruct", "--checkpoint", str(ckpt), "--input", source, "--acceleration", "5",
                "--out", str(tmp_path / f"{name}.kspv"), "--png-dir", str(tmp_path / name),
            )  # fmt: skip
        assert (tmp_path / "a.kspv").read_bytes() == (tmp_path / "b.kspv").read_bytes()
        assert sorted(p.name for p in (tmp_path / "a").iterdir()) == ["slice_000_R5.png", "slice_001_R5.png"]

    def test_output_readable_by_evaluate(self, workspace, tmp_path, capsys):
        ckpt = zero_weight_checkpoint(tmp_path / "zero.ckpt")
        source = str(workspace / "data" / "volume_000.kspv")
        run(workspace, "reconstruct", "--checkpoint", str(ckpt), "--input", source, "--acceleration", "1", "--out", str(tmp_path / "r.kspv"))
        code = run(
            workspace, "evaluate", "--method", "volume", "--recon", str(tmp_path / "r.kspv"), "--input", source,
            "--accelerations", "1", "--out", str(tmp_path / "rep"),
        )  # fmt: skip
        assert code == 0
        summary = [json.loads(l) for l in (tmp_path / "rep" / "report_volume.jsonl").read_text().splitlines()][-1]
        assert summary["record"] == "summary" and summary["ssim"] > 0.99999


class TestEvaluate:
    def test_zero_filled_full_sampling(self, workspace, tmp_path, capsys):
        code = run(workspace, "evaluate", "--manifest", str(workspace / "data"), "--accelerations", "1", "--out", str(tmp_path))
        assert code == 0
        summary = json.loads((tmp_path / "report_zero-filled.jsonl").read_text().splitlines()[-1])
        assert summary["ssim"] == 1.0

    def test_one_row_per_acceleration(self, workspace, tmp_path, capsys):
        run(workspace, "evaluate", "--manifest", str(workspace / "data"), "--accelerations", "5", "10", "--out", str(tmp_path))
        table = (tmp_path / "report_zero-filled.txt").read_text().splitlines()
        assert [line.split()[0] for line in table[1:]] == ["5", "10"]

    def _test_volumes(self, workspace):
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        return [(e["path"], read_volume(workspace / "data" / e["path"]).data) for e in manifest["volumes"] if e["split"] == "test"]

    def test_matches_library_zero_filled(self, workspace, tmp_path):
        run(workspace, "evaluate", "--manifest", str(workspace / "data"), "--accelerations", "5", "10", "--out", str(tmp_path))
        direct = evaluate_dataset(self._test_volumes(workspace), zero_filled_reconstructor, [5.0, 10.0], seed=7)
        summaries = [json.loads(l) for l in (tmp_path / "report_zero-filled.jsonl").read_text().splitlines()][-2:]
        for row, expected in zip(summaries, direct.summary):
            for metric in ("ssim", "psnr", "nmse"):
                assert abs(row[metric] - expected[metric]) < 1e-9

    def test_matches_library_model(self, workspace, tmp_path):
        ckpt = tmp_path / "m.ckpt"
        torch.manual_seed(0)
        save_checkpoint(ckpt, capture(RecurrentVarNet(ModelConfig(time_steps=2, recurrent_layers=1, hidden_channels=4)), None, 0))
        code = run(
            workspace, "evaluate", "--method", "model", "--checkpoint", str(ckpt), "--manifest", str(workspace / "data"),
            "--accelerations", "5", "--out", str(tmp_path), "--figures",
        )  # fmt: skip
        assert code == 0
        direct = evaluate_dataset(self._test_volumes(workspace), model_reconstructor(model_from_checkpoint(ckpt)), [5.0], seed=7)
        row = json.loads((tmp_path / "report_model.jsonl").read_text().splitlines()[-1])
        for metric in ("ssim", "psnr", "nmse"):
            assert abs(row[metric] - direct.summary[0][metric]) < 1e-9
        assert len(list((tmp_path / "figures").glob("*.png"))) == 1

    def test_model_without_checkpoint(self, workspace, tmp_path):
        assert run(workspace, "evaluate", "--method", "model", "--manifest", str(workspace / "data"), "--out", str(tmp_path)) == 1

    def test_unknown_method(self, workspace, tmp_path):
        assert run(workspace, "evaluate", "--method", "magic", "--manifest", str(workspace / "data"), "--out", str(tmp_path)) == 1


def test_module_entry_point(workspace):
    result = subprocess.run(
        [sys.executable, "-m", "recvarnet", "generate-data", "--config", str(workspace / "tiny.yaml"), "--out", str(workspace / "m")],
        capture_output=True,
        text=True,
    )
    assert result.returncode == 0 and result.stdout.startswith("# resolved config")


@pytest.mark.parametrize("name", ["desk", "overfit", "full"])
def test_shipped_configs_load(name):
    config = load_config(Path(__file__).parent.parent / "configs" / f"{name}.yaml")
    model_config(config)
    train_config(config)
