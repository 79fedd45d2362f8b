import json
from pathlib import Path

import numpy as np
import pytest
import torch

from m2hvideo.checkpoint import save_checkpoint
from m2hvideo.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_VIOLATIONS, build_parser, main
from m2hvideo.model import M2HModel

from test_training import MICRO_MODEL

MICRO_CFG_TEXT = """
data.seed = 3
data.num_samples = 1
data.frames = 29
data.height = 32
data.width = 16

model.base_width = 16
model.channel_multipliers = [1, 2]
model.attention_levels = [1]
model.id_token_dim = 16
model.clip_token_dim = 16
model.null_token_count = 4
model.vae_base_width = 16
model.face_dim = 8
model.head_layers = 2
model.pose_encoder_width = 8

train.n_iter = 2
train.batch_size = 1
train.vae_pretrain_steps = 2
train.checkpoint_every = 10
"""


@pytest.fixture(scope="module")
def cfg_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "run.cfg"
    path.write_text(MICRO_CFG_TEXT)
    return path


@pytest.fixture(scope="module")
def cli_dataset(tmp_path_factory, cfg_file):
    out = tmp_path_factory.mktemp("cli_ds")
    assert main(["make-data", "--spec", str(cfg_file), "--out", str(out)]) == EXIT_OK
    return out


class TestMakeDataAndValidate:
    def test_pristine_tree_validates_clean(self, cli_dataset, tmp_path):
        report_path = tmp_path / "report.json"
        code = main(["validate", "--root", str(cli_dataset), "--report", str(report_path)])
        assert code == EXIT_OK
        payload = json.loads(report_path.read_text())
        assert payload["ok"] is True and payload["violations"] == []

    def test_violations_exit_nonzero(self, cfg_file, tmp_path):
        root = tmp_path / "ds"
        assert main(["make-data", "--spec", str(cfg_file), "--out", str(root)]) == EXIT_OK
        (root / "human_0000" / "masks" / "00001.png").unlink()
        assert main(["validate", "--root", str(root)]) == EXIT_VIOLATIONS

    def test_missing_root_is_data_error(self, tmp_path):
        assert main(["validate", "--root", str(tmp_path / "absent")]) == EXIT_DATA

    def test_deterministic_across_runs(self, cfg_file, tmp_path):
        import hashlib

        def digest(root: Path) -> str:
            h = hashlib.sha256()
            for p in sorted(root.rglob("*")):
                if p.is_file() and p.name != "make_data_summary.json":
                    h.update(str(p.relative_to(root)).encode() + p.read_bytes())
            return h.hexdigest()

        a, b = tmp_path / "a", tmp_path / "b"
        main(["make-data", "--spec", str(cfg_file), "--out", str(a)])
        main(["make-data", "--spec", str(cfg_file), "--out", str(b)])
        assert digest(a) == digest(b)


class TestConfigErrors:
    def test_unknown_key_exits_2(self, tmp_path, cli_dataset):
        bad = tmp_path / "bad.cfg"
        bad.write_text("train.not_a_knob = 1\n")
        code = main(["train", "--config", str(bad), "--data", str(cli_dataset),
                     "--out", str(tmp_path / "out")])
        assert code == EXIT_CONFIG

    def test_locked_output_exits_2(self, cfg_file, tmp_path):
        out = tmp_path / "locked"
        out.mkdir()
        (out / ".m2hvideo.lock").write_text("123")
        code = main(["make-data", "--spec", str(cfg_file), "--out", str(out)])
        assert code == EXIT_CONFIG


class TestEvaluate:
    def test_identity_metrics_on_identical_dirs(self, cli_dataset, cfg_file, tmp_path):
        # another tiny dataset so the sets hold >= 2 videos for the
        # distribution metric
        report_path = tmp_path / "eval" / "report.json"
        code = main(["evaluate",
                     "--generated", str(cli_dataset),
                     "--reference", str(cli_dataset),
                     "--masks", str(cli_dataset),
                     "--report", str(report_path)])
        assert code == EXIT_OK
        payload = json.loads(report_path.read_text())
        agg = payload["aggregate"]
        assert agg["psnr_db"] == 99.0
        assert agg["fvd"] <= 1e-4
        assert agg["csim"] == pytest.approx(1.0)
        assert report_path.with_suffix(".csv").exists()
        assert report_path.with_suffix(".png").exists()
        header = report_path.with_suffix(".csv").read_text().splitlines()[0]
        assert header == "method,psnr_db,ssim,perceptual,csim,fvd"

    def test_mismatched_roots_are_data_error(self, cli_dataset, tmp_path):
        empty = tmp_path / "none"
        empty.mkdir()
        code = main(["evaluate", "--generated", str(empty),
                     "--reference", str(cli_dataset), "--masks", str(cli_dataset),
                     "--report", str(tmp_path / "r.json")])
        assert code == EXIT_DATA


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    torch.manual_seed(5)
    model = M2HModel(MICRO_MODEL)
    path = tmp_path_factory.mktemp("ckpt") / "model.npz"
    save_checkpoint(path, model.state_arrays(),
                    {"kind": "model", "model_config": MICRO_MODEL.to_json_obj()})
    return path


class TestGenerateCommand:
    def test_generate_runs_and_is_deterministic(self, cli_dataset, checkpoint, tmp_path):
        outs = []
        for name in ("g1", "g2"):
            out = tmp_path / name
            code = main(["generate", "--ckpt", str(checkpoint),
                         "--sample", "mannequin_0000", "--data", str(cli_dataset),
                         "--identity", str(cli_dataset / "human_0000" / "identity.png"),
                         "--steps", "2", "--seed", "9", "--out", str(out)])
            assert code == EXIT_OK
            frames = sorted((out / "frames").glob("*.png"))
            assert len(frames) == 29
            outs.append(b"".join(p.read_bytes() for p in frames))
        assert outs[0] == outs[1]
        sidecar = json.loads((tmp_path / "g1" / "request.json").read_text())
        assert sidecar["request"]["guidance_scale"] == 7.5  # config default applied

    def test_missing_sample_exits_3(self, cli_dataset, checkpoint, tmp_path):
        code = main(["generate", "--ckpt", str(checkpoint),
                     "--sample", "not_there", "--data", str(cli_dataset),
                     "--identity", str(cli_dataset / "human_0000" / "identity.png"),
                     "--out", str(tmp_path / "x")])
        assert code == EXIT_DATA


class TestHelp:
    def test_generate_help_lists_defaults(self, capsys):
        parser = build_parser()
        with pytest.raises(SystemExit):
            parser.parse_args(["generate", "--help"])
        text = capsys.readouterr().out
        for flag in ("--ckpt", "--sample", "--identity", "--steps", "--cfg", "--seed", "--out"):
            assert flag in text
        assert "default 50" in text and "default 7.5" in text

    def test_all_subcommands_present(self, capsys):
        parser = build_parser()
        with pytest.raises(SystemExit):
            parser.parse_args(["--help"])
        text = capsys.readouterr().out
        for cmd in ("make-data", "validate", "train", "generate", "evaluate"):
            assert cmd in text
