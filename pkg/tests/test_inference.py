import json

import numpy as np
import pytest
import torch

from m2hvideo.checkpoint import save_checkpoint
from m2hvideo.data import SynthSpec, generate_synthetic
from m2hvideo.diffusion import cosine_schedule, ddim_step, uniform_timesteps
from m2hvideo.errors import ConfigError, DataError, RangeError
from m2hvideo.inference import (
    InferenceRequest,
    generate,
    generate_with_model,
    save_generation,
)
from m2hvideo.model import M2HModel, ModelConfig

from test_training import MICRO_MODEL, MICRO_SPEC


@pytest.fixture(scope="module")
def infer_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("infer_ds")
    generate_synthetic(MICRO_SPEC, root)
    torch.manual_seed(77)
    model = M2HModel(MICRO_MODEL).eval()
    return root, model


def make_request(root, steps=4, scale=7.5, seed=3, clamp=4.0):
    return InferenceRequest(
        mannequin_sample_ref=str(root / "mannequin_0000"),
        identity_image_ref=str(root / "human_0000" / "identity.png"),
        steps=steps, guidance_scale=scale, seed=seed, denoised_clamp=clamp)


class TestRequestValidation:
    def test_bad_steps(self):
        with pytest.raises(RangeError):
            InferenceRequest("x", "y", steps=0)

    def test_bad_scale(self):
        with pytest.raises(RangeError):
            InferenceRequest("x", "y", guidance_scale=-1.0)


class TestGenerate:
    def test_output_shape_and_range(self, infer_env):
        root, model = infer_env
        video = generate_with_model(model, make_request(root))
        assert video.shape == (MICRO_SPEC.frames, 3, MICRO_SPEC.height, MICRO_SPEC.width)
        assert video.min() >= 0.0 and video.max() <= 1.0

    def test_fixed_seed_is_bit_identical(self, infer_env):
        root, model = infer_env
        a = generate_with_model(model, make_request(root, seed=11))
        b = generate_with_model(model, make_request(root, seed=11))
        assert np.array_equal(a, b)
        c = generate_with_model(model, make_request(root, seed=12))
        assert not np.array_equal(a, c)

    def test_guidance_scale_one_matches_conditional_trajectory(self, infer_env):
        root, model = infer_env
        sched = cosine_schedule(1000)
        req = make_request(root, steps=6, scale=1.0, seed=21, clamp=0.0)
        guided = generate_with_model(model, req, sched)

        # reference: run the purely conditional sampler over the same windows
        from m2hvideo.data import read_mask_dir, read_pose_file, read_video_dir

        sample = root / "mannequin_0000"
        video = read_video_dir(sample / "frames")
        masks = read_mask_dir(sample / "masks")
        pose = read_pose_file(sample / "pose.json")
        from m2hvideo.data import read_image

        identity = torch.from_numpy(read_image(root / "human_0000" / "identity.png")[None])
        facial = read_pose_file(root / "human_0000" / "facial_pose.json")
        clothing = torch.from_numpy(video * masks)
        g = torch.Generator().manual_seed(21)
        window = model.cfg.backbone.num_frames
        outs = []
        ts = uniform_timesteps(1000, 6)
        with torch.no_grad():
            for start in range(0, video.shape[0], window):
                idx = list(range(start, min(start + window, video.shape[0])))
                prep = model.prepare_conditioning(clothing[idx], identity, facial,
                                                  pose.frames(idx))
                h, w = prep.clothing_latent.shape[-2:]
                z = torch.randn(len(idx), 4, h, w, generator=g)
                for t, t_prev in zip(ts[:-1], ts[1:]):
                    eps = model.predict_noise(z, t, prep, drop_cond=False)
                    z = ddim_step(z, eps, t, t_prev, sched)
                outs.append(model.vae.decode(z).clamp(0, 1).numpy())
        reference = np.concatenate(outs)
        assert np.max(np.abs(guided - reference)) <= 1e-4

    def test_missing_sample_files(self, infer_env, tmp_path):
        root, model = infer_env
        req = InferenceRequest(str(tmp_path / "nope"),
                               str(root / "human_0000" / "identity.png"))
        with pytest.raises(DataError):
            generate_with_model(model, req)

    def test_identity_sidecar_required(self, infer_env, tmp_path):
        root, model = infer_env
        lone = tmp_path / "id.png"
        lone.write_bytes((root / "human_0000" / "identity.png").read_bytes())
        req = InferenceRequest(str(root / "mannequin_0000"), str(lone), steps=2)
        with pytest.raises(DataError):
            generate_with_model(model, req)


class TestCheckpointedGenerate:
    def test_generate_from_checkpoint_and_config_check(self, infer_env, tmp_path):
        root, model = infer_env
        path = tmp_path / "model.npz"
        save_checkpoint(path, model.state_arrays(),
                        {"kind": "model", "model_config": MICRO_MODEL.to_json_obj()})
        req = make_request(root, steps=2)
        video = generate(req, path, expected_config=MICRO_MODEL)
        assert video.shape[0] == MICRO_SPEC.frames

        other = ModelConfig(backbone=MICRO_MODEL.backbone, vae_base_width=24,
                            face_dim=8, head_layers=2, pose_encoder_width=8)
        with pytest.raises(ConfigError):
            generate(req, path, expected_config=other)

    def test_save_generation_layout(self, infer_env, tmp_path):
        root, model = infer_env
        path = tmp_path / "model.npz"
        save_checkpoint(path, model.state_arrays(),
                        {"kind": "model", "model_config": MICRO_MODEL.to_json_obj()})
        req = make_request(root, steps=2)
        video = generate_with_model(model, req)
        out = save_generation(video, tmp_path / "gen", req, path, save_container=True)
        frames = sorted((out / "frames").glob("*.png"))
        assert len(frames) == MICRO_SPEC.frames
        sidecar = json.loads((out / "request.json").read_text())
        assert sidecar["request"]["steps"] == 2
        assert len(sidecar["checkpoint_sha256"]) == 64
        stored = np.load(out / "video.npz")["video"]
        assert np.array_equal(stored, video)
