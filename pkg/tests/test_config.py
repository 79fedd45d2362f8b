import pytest

from m2hvideo.config import (
    RunConfig,
    load_run_config,
    parse_config_text,
    run_config_from_tree,
)
from m2hvideo.errors import ConfigError


class TestParser:
    def test_scalars_and_comments(self):
        tree = parse_config_text(
            """
            # a comment
            train.n_iter = 42
            train.learning_rate = 5e-5
            model.temporal_zero_init = true
            eval.mask_scope = "full_frame"
            data.seed = 7
            """)
        assert tree["train"]["n_iter"] == 42
        assert tree["train"]["learning_rate"] == 5e-5
        assert tree["model"]["temporal_zero_init"] is True
        assert tree["eval"]["mask_scope"] == "full_frame"
        assert tree["data"]["seed"] == 7

    def test_lists(self):
        tree = parse_config_text("model.channel_multipliers = [1, 2, 4]\n")
        assert tree["model"]["channel_multipliers"] == [1, 2, 4]

    def test_bare_strings(self):
        tree = parse_config_text("eval.method = baseline_x\n")
        assert tree["eval"]["method"] == "baseline_x"

    def test_missing_equals_rejected(self):
        with pytest.raises(ConfigError):
            parse_config_text("train.n_iter 42\n")

    def test_key_subtree_conflict(self):
        with pytest.raises(ConfigError):
            parse_config_text("train = 3\ntrain.n_iter = 4\n")


class TestRunConfig:
    def test_defaults_validate(self):
        cfg = RunConfig().validate()
        assert cfg.infer.steps == 50
        assert cfg.infer.guidance_scale == 7.5
        assert cfg.train.learning_rate == 5e-5
        assert cfg.train.adam_beta1 == 0.0 and cfg.train.adam_beta2 == 0.99
        assert cfg.model.backbone.channel_multipliers == (1, 2, 4)

    def test_unknown_section_rejected(self):
        with pytest.raises(ConfigError) as exc:
            run_config_from_tree({"serving": {"port": 80}})
        assert "serving" in str(exc.value)

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as exc:
            run_config_from_tree({"train": {"n_iters": 10}})
        assert "n_iters" in str(exc.value)

    def test_resolution_divisibility_checked(self):
        with pytest.raises(ConfigError):
            run_config_from_tree({"data": {"height": 60, "width": 32}})

    def test_frames_window_consistency(self):
        with pytest.raises(ConfigError):
            run_config_from_tree({"data": {"frames": 29},
                                  "train": {"frame_stride": 5}})

    def test_frames_per_clip_must_match_model(self):
        with pytest.raises(ConfigError):
            run_config_from_tree({"data": {"frames": 64}, "train": {"frames_per_clip": 9}})

    def test_model_section_flattens_backbone(self):
        cfg = run_config_from_tree({
            "model": {"base_width": 32, "vae_base_width": 24,
                      "channel_multipliers": [1, 2], "attention_levels": [1]},
        })
        assert cfg.model.backbone.base_width == 32
        assert cfg.model.vae_base_width == 24
        assert cfg.model.backbone.channel_multipliers == (1, 2)

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("train.n_iter = 8\ntrain.seed = 5\ndata.num_samples = 1\n")
        cfg = load_run_config(path)
        assert cfg.train.n_iter == 8
        assert cfg.data.num_samples == 1

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_run_config(tmp_path / "absent.cfg")

    def test_bad_loss_preset(self):
        with pytest.raises(ConfigError):
            run_config_from_tree({"train": {"loss_preset": "nope"}})
