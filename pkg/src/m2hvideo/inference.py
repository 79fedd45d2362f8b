"""Inference: given a mannequin sample's clothing masks and body poses plus
an identity image, run guided deterministic sampling and decode the generated
human video.

Clips longer than the trained window are generated in consecutive
non-overlapping windows sharing the request seed and identity conditioning.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import checkpoint_hash, load_checkpoint
from .data import read_image, read_mask_dir, read_pose_file, read_video_dir, write_image
from .diffusion import (
    NoiseSchedule,
    cfg_combine,
    cosine_schedule,
    ddim_step,
    one_step_denoise,
    uniform_timesteps,
)
from .errors import ConfigError, DataError, RangeError
from .model import M2HModel, ModelConfig, model_from_checkpoint


@dataclass(frozen=True)
class InferenceRequest:
    mannequin_sample_ref: str       # path to a sample directory (standard layout)
    identity_image_ref: str         # image path; facial_pose.json sidecar required
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    denoised_clamp: float = 4.0     # |x0| bound during sampling; 0 disables

    def __post_init__(self):
        if self.steps < 1:
            raise RangeError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise RangeError("guidance_scale must be >= 0")

    def to_json_obj(self) -> dict:
        return asdict(self)


def _load_sample_dir(sample_dir: Path):
    frames_dir, masks_dir = sample_dir / "frames", sample_dir / "masks"
    pose_file = sample_dir / "pose.json"
    missing = [str(p) for p in (frames_dir, masks_dir, pose_file) if not p.exists()]
    if missing:
        raise DataError(f"mannequin sample incomplete, missing: {missing}")
    video = read_video_dir(frames_dir)
    masks = read_mask_dir(masks_dir)
    pose = read_pose_file(pose_file)
    if not (video.shape[0] == masks.shape[0] == pose.num_frames):
        raise DataError(
            f"frame/mask/pose counts disagree in {sample_dir}: "
            f"{video.shape[0]}/{masks.shape[0]}/{pose.num_frames}")
    return video, masks, pose


def _load_identity(identity_path: Path):
    image = read_image(identity_path)[None]  # [1, 3, H, W]
    sidecar = identity_path.parent / "facial_pose.json"
    if not sidecar.exists():
        raise DataError(
            f"identity image {identity_path} needs a facial_pose.json sidecar "
            "in the same directory")
    return image, read_pose_file(sidecar)


def sample_window(model: M2HModel, sched: NoiseSchedule, prep, z_init: torch.Tensor,
                  steps: int, guidance_scale: float,
                  denoised_clamp: float = 4.0) -> torch.Tensor:
    """Guided deterministic sampling for one window of latent frames.

    ``denoised_clamp`` bounds the intermediate clean-latent estimate (latents
    are unit-scale after VAE calibration), which keeps the trajectory on
    distribution at the near-pure-noise timesteps where the estimate gets
    amplified by 1/sqrt(alpha_bar). With clamp disabled (0) each update is
    exactly the deterministic sampler step.
    """
    z = z_init
    ts = uniform_timesteps(sched.num_steps, steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps_uncond = model.predict_noise(z, t, prep, drop_cond=True)
        eps_cond = model.predict_noise(z, t, prep, drop_cond=False)
        eps = cfg_combine(eps_uncond, eps_cond, guidance_scale)
        if denoised_clamp > 0:
            x0 = one_step_denoise(z, eps, t, sched, mode="exact")
            x0 = x0.clamp(-denoised_clamp, denoised_clamp)
            ab_prev = float(sched.alpha_bar[t_prev])
            z = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
        else:
            z = ddim_step(z, eps, t, t_prev, sched)
    return z


def generate_with_model(model: M2HModel, req: InferenceRequest,
                        sched: NoiseSchedule | None = None) -> np.ndarray:
    """Run the full generation for ``req`` on an already-loaded model.

    Returns the generated video as float32 [T, 3, H, W] in [0, 1] with T equal
    to the mannequin clip's frame count.
    """
    sched = sched or cosine_schedule()
    sample_dir = Path(req.mannequin_sample_ref)
    video, masks, pose = _load_sample_dir(sample_dir)
    identity_image, facial_pose = _load_identity(Path(req.identity_image_ref))

    clothing = torch.from_numpy(video * masks)
    x_id = torch.from_numpy(identity_image)
    total = video.shape[0]
    window = model.cfg.backbone.num_frames
    generator = torch.Generator().manual_seed(req.seed)

    model.eval()
    outputs = []
    with torch.no_grad():
        for start in range(0, total, window):
            idx = list(range(start, min(start + window, total)))
            prep = model.prepare_conditioning(clothing[idx], x_id, facial_pose,
                                              pose.frames(idx))
            h, w = prep.clothing_latent.shape[-2:]
            z = torch.randn(len(idx), model.cfg.backbone.latent_channels, h, w,
                            generator=generator)
            z0 = sample_window(model, sched, prep, z, req.steps, req.guidance_scale,
                               denoised_clamp=req.denoised_clamp)
            outputs.append(model.vae.decode(z0).clamp(0.0, 1.0).numpy())
    return np.concatenate(outputs).astype(np.float32)


def generate(req: InferenceRequest, checkpoint_path: str | Path,
             expected_config: ModelConfig | None = None) -> np.ndarray:
    """Load the checkpoint (validating it against ``expected_config`` when
    given) and generate the requested video."""
    arrays, meta = load_checkpoint(checkpoint_path)
    if expected_config is not None and meta.get("model_config") != expected_config.to_json_obj():
        raise ConfigError("checkpoint/model configuration mismatch")
    model = model_from_checkpoint(arrays, meta)
    sched = cosine_schedule(meta.get("train_config", {}).get("diffusion_steps", 1000))
    return generate_with_model(model, req, sched)


def save_generation(video: np.ndarray, out_dir: str | Path, req: InferenceRequest,
                    checkpoint_path: str | Path, save_container: bool = False) -> Path:
    """Write numbered PNG frames plus a JSON sidecar recording the request
    parameters and checkpoint hash; optionally a lossless NPZ container."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(video):
        write_image(out / "frames" / f"{i:05d}.png", frame)
    sidecar = {
        "request": req.to_json_obj(),
        "checkpoint_sha256": checkpoint_hash(checkpoint_path),
        "num_frames": int(video.shape[0]),
        "height": int(video.shape[2]),
        "width": int(video.shape[3]),
    }
    (out / "request.json").write_text(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")
    if save_container:
        np.savez_compressed(out / "video.npz", video=video)
    return out
