"""End-to-end training: frame sampling, progressive resolution, forward
noising, conditioning assembly, the combined latent + pixel-space objective,
optimizer stepping, checkpointing, and resume.

The loop is single-writer and fully deterministic given (config, seed): all
randomness flows through one numpy generator (data selection) and one torch
generator (noise, timesteps, condition dropout), both checkpointed.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint
from .data import FACE_JOINT_NAMES, PoseSequence, SampleRecord, list_samples, read_mask_dir, read_pose_file, read_video_dir, validate_dataset
from .diffusion import NoiseSchedule, cosine_schedule, one_step_denoise, q_sample
from .encoders import fit_vae
from .errors import ConfigError, DataError, NumericError
from .losses import PRESET_WEIGHTS, LossWeights, diffusion_loss, mirror_loss, total_loss
from .model import M2HModel, ModelConfig

LOSS_LOG_HEADER = ("iter", "loss_total", "loss_diff", "loss_mir", "lr", "resolution")


@dataclass(frozen=True)
class TrainConfig:
    n_iter: int = 500
    batch_size: int = 4
    learning_rate: float = 5e-5
    adam_beta1: float = 0.0
    adam_beta2: float = 0.99
    frames_per_clip: int = 8
    frame_stride: int = 4
    progressive_switch: int = -1        # -1 resolves to n_iter // 2
    cfg_dropout_p: float = 0.1
    seed: int = 0
    diffusion_steps: int = 1000
    checkpoint_every: int = 500
    vae_pretrain_steps: int = 300
    vae_pretrain_lr: float = 2e-3
    loss_preset: str = "default"
    mirror_alpha: float = -1.0          # -1 keeps the preset value
    mirror_beta: float = -1.0

    def __post_init__(self):
        if self.n_iter < 2:
            raise ConfigError("n_iter must be >= 2")
        if not 0.0 <= self.cfg_dropout_p <= 1.0:
            raise ConfigError("cfg_dropout_p must lie in [0, 1]")
        if self.loss_preset not in PRESET_WEIGHTS:
            raise ConfigError(f"unknown loss preset {self.loss_preset!r}")

    @property
    def switch_iteration(self) -> int:
        return self.progressive_switch if self.progressive_switch >= 0 else self.n_iter // 2

    @property
    def window_span(self) -> int:
        return (self.frames_per_clip - 1) * self.frame_stride + 1

    def loss_weights(self) -> LossWeights:
        base = PRESET_WEIGHTS[self.loss_preset]
        alpha = base.alpha if self.mirror_alpha < 0 else self.mirror_alpha
        beta = base.beta if self.mirror_beta < 0 else self.mirror_beta
        return LossWeights(alpha=alpha, beta=beta, layer_names=base.layer_names)

    def to_json_obj(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json_obj(cls, obj: dict) -> "TrainConfig":
        return cls(**obj)


def sample_frames(video_length: int, cfg: TrainConfig, rng: np.random.Generator) -> list[int]:
    """Uniform random window start, then every ``frame_stride``-th frame."""
    span = cfg.window_span
    if video_length < span:
        raise DataError(
            f"video too short: {video_length} frames, need >= {span} for "
            f"{cfg.frames_per_clip} frames at stride {cfg.frame_stride}")
    start = int(rng.integers(0, video_length - span + 1))
    return [start + k * cfg.frame_stride for k in range(cfg.frames_per_clip)]


def downsample_video(v: torch.Tensor) -> torch.Tensor:
    """Area-averaging x0.5."""
    return F.avg_pool2d(v, 2)


def downsample_mask(m: torch.Tensor) -> torch.Tensor:
    """Nearest-neighbor x0.5, re-binarized at 0.5 to keep {0, 1} semantics."""
    return (m[:, :, ::2, ::2] >= 0.5).to(m.dtype)


@dataclass
class _CachedSample:
    sample_id: str
    video: np.ndarray
    masks: np.ndarray
    face_masks: np.ndarray
    pose: PoseSequence
    num_frames: int


class _SampleCache:
    """Keeps decoded training samples in memory (desk-scale datasets)."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self._cache: dict[str, _CachedSample] = {}

    def get(self, sample_id: str) -> _CachedSample:
        if sample_id not in self._cache:
            rec = SampleRecord.from_dir(self.root, sample_id)
            if rec.face_mask_dir is None:
                raise DataError(
                    f"sample {sample_id}: training requires human-domain samples with face masks")
            self._cache[sample_id] = _CachedSample(
                sample_id=sample_id,
                video=read_video_dir(rec.frames_dir),
                masks=read_mask_dir(rec.masks_dir),
                face_masks=read_mask_dir(rec.face_mask_dir),
                pose=read_pose_file(rec.pose_file),
                num_frames=rec.meta["num_frames"],
            )
        return self._cache[sample_id]


@dataclass
class BatchItem:
    sample_id: str
    frame_indices: list[int]
    identity_index: int


@dataclass
class LossRecord:
    iteration: int
    loss_total: float
    loss_diff: float
    loss_mir: float
    lr: float
    resolution: str
    dropped: int


class TrainLoop:
    """Holds the mutable training state; ``step`` executes one iteration."""

    def __init__(self, model: M2HModel, cfg: TrainConfig, dataset_root: str | Path,
                 sample_ids: list[str], sched: NoiseSchedule | None = None):
        if not sample_ids:
            raise DataError("no training samples")
        self.model = model
        self.cfg = cfg
        self.sample_ids = sorted(sample_ids)
        self.cache = _SampleCache(Path(dataset_root))
        self.sched = sched or cosine_schedule(cfg.diffusion_steps)
        self.weights = cfg.loss_weights()
        self.params = model.trainable_parameters()
        self.optimizer = torch.optim.Adam(
            self.params, lr=cfg.learning_rate,
            betas=(cfg.adam_beta1, cfg.adam_beta2), weight_decay=0.0)
        self.iteration = 0
        self.data_rng = np.random.default_rng(cfg.seed)
        self.torch_rng = torch.Generator().manual_seed(cfg.seed + 1)
        self.dropped_total = 0
        self.conditional_total = 0

    # -- batch assembly -----------------------------------------------------

    def next_batch(self) -> list[BatchItem]:
        items = []
        for _ in range(self.cfg.batch_size):
            sid = self.sample_ids[int(self.data_rng.integers(len(self.sample_ids)))]
            entry = self.cache.get(sid)
            try:
                indices = sample_frames(entry.num_frames, self.cfg, self.data_rng)
            except DataError as exc:
                raise DataError(f"sample {sid}: {exc}") from exc
            identity_index = int(self.data_rng.integers(entry.num_frames))
            items.append(BatchItem(sid, indices, identity_index))
        return items

    def _tensors_for(self, item: BatchItem, half_resolution: bool):
        entry = self.cache.get(item.sample_id)
        v = torch.from_numpy(entry.video[item.frame_indices])
        masks = torch.from_numpy(entry.masks[item.frame_indices])
        face = torch.from_numpy(entry.face_masks[item.frame_indices])
        x_id = torch.from_numpy(entry.video[item.identity_index:item.identity_index + 1])
        body = entry.pose.frames(item.frame_indices)
        facial = entry.pose.frames([item.identity_index]).select_joints(FACE_JOINT_NAMES)
        if half_resolution:
            v, x_id = downsample_video(v), downsample_video(x_id)
            masks, face = downsample_mask(masks), downsample_mask(face)
            body, facial = body.scaled(0.5), facial.scaled(0.5)
        return v, masks, face, x_id, body, facial

    # -- one iteration --------------------------------------------------------

    def step(self, batch: list[BatchItem] | None = None) -> LossRecord:
        cfg = self.cfg
        self.iteration += 1
        half = self.iteration <= cfg.switch_iteration
        if batch is None:
            batch = self.next_batch()

        self.optimizer.zero_grad()
        sum_total = sum_diff = sum_mir = 0.0
        dropped = 0
        resolution = ""
        for item in batch:
            v, masks, face, x_id, body, facial = self._tensors_for(item, half)
            resolution = f"{v.shape[2]}x{v.shape[3]}"

            t = int(torch.randint(1, self.sched.num_steps + 1, (1,),
                                  generator=self.torch_rng).item())
            with torch.no_grad():
                z0 = self.model.vae.encode(v)
            eps = torch.randn(z0.shape, generator=self.torch_rng, dtype=z0.dtype)
            z_t = q_sample(z0, t, eps, self.sched)

            prep = self.model.prepare_conditioning(v * masks, x_id, facial, body)
            drop = bool(torch.rand(1, generator=self.torch_rng).item() < cfg.cfg_dropout_p)
            dropped += drop
            eps_pred = self.model.predict_noise(z_t, t, prep, drop_cond=drop)

            l_diff = diffusion_loss(eps, eps_pred)
            z0_est = one_step_denoise(z_t, eps_pred, t, self.sched, mode="exact")
            v_g = self.model.vae.decode(z0_est)
            l_mir = mirror_loss(v, v_g, face, self.weights, self.model.perceptual)
            try:
                l_total = total_loss(l_diff, l_mir)
            except NumericError as exc:
                raise NumericError(f"{self._diagnostic(batch, item)}: {exc}") from exc
            (l_total / len(batch)).backward()
            sum_total += l_total.item()
            sum_diff += l_diff.item()
            sum_mir += l_mir.item()

        self.optimizer.step()
        self.dropped_total += dropped
        self.conditional_total += len(batch) - dropped
        n = len(batch)
        record = LossRecord(self.iteration, sum_total / n, sum_diff / n, sum_mir / n,
                            cfg.learning_rate, resolution, dropped)
        if not np.isfinite(record.loss_total):
            raise NumericError(self._diagnostic(batch, None))
        return record

    def _diagnostic(self, batch: list[BatchItem], item: BatchItem | None) -> str:
        ids = [f"{b.sample_id}@{b.frame_indices[0]}" for b in batch]
        where = f" (offending sample {item.sample_id})" if item else ""
        return f"non-finite loss at iteration {self.iteration}{where}; batch: {ids}"

    # -- state (de)serialization ---------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = self.model.state_arrays()
        for idx, p in enumerate(self.params):
            state = self.optimizer.state.get(p)
            if state:
                arrays[f"optim.{idx}.step"] = np.asarray(
                    state["step"].item() if torch.is_tensor(state["step"]) else state["step"],
                    dtype=np.float64)
                arrays[f"optim.{idx}.exp_avg"] = state["exp_avg"].numpy().copy()
                arrays[f"optim.{idx}.exp_avg_sq"] = state["exp_avg_sq"].numpy().copy()
        arrays["rng.torch"] = self.torch_rng.get_state().numpy().copy()
        return arrays

    def meta(self, model_cfg: ModelConfig) -> dict:
        return {
            "kind": "train_state",
            "iteration": self.iteration,
            "model_config": model_cfg.to_json_obj(),
            "train_config": self.cfg.to_json_obj(),
            "rng_numpy": json.loads(json.dumps(self.data_rng.bit_generator.state)),
            "counters": {"dropped": self.dropped_total, "conditional": self.conditional_total},
        }

    def save(self, path: str | Path, model_cfg: ModelConfig) -> None:
        save_checkpoint(path, self.state_arrays(), self.meta(model_cfg))

    def restore(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        self.model.load_state_arrays(arrays)
        for idx, p in enumerate(self.params):
            key = f"optim.{idx}.exp_avg"
            if key in arrays:
                self.optimizer.state[p] = {
                    "step": torch.tensor(float(arrays[f"optim.{idx}.step"])),
                    "exp_avg": torch.from_numpy(arrays[key].copy()),
                    "exp_avg_sq": torch.from_numpy(arrays[f"optim.{idx}.exp_avg_sq"].copy()),
                }
        self.torch_rng.set_state(torch.from_numpy(arrays["rng.torch"].copy()))
        self.data_rng.bit_generator.state = meta["rng_numpy"]
        self.iteration = meta["iteration"]
        counters = meta.get("counters", {})
        self.dropped_total = counters.get("dropped", 0)
        self.conditional_total = counters.get("conditional", 0)


class LossLog:
    """Append-only CSV: iter,loss_total,loss_diff,loss_mir,lr,resolution."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        if not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(LOSS_LOG_HEADER)

    def append(self, rec: LossRecord) -> None:
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([
                rec.iteration, f"{rec.loss_total:.8f}", f"{rec.loss_diff:.8f}",
                f"{rec.loss_mir:.8f}", f"{rec.lr:.2e}", rec.resolution])


def collect_frames(root: str | Path, sample_ids: list[str]) -> torch.Tensor:
    stacks = [read_video_dir(Path(root) / sid / "frames") for sid in sorted(sample_ids)]
    return torch.from_numpy(np.concatenate(stacks))


def run_training(dataset_root: str | Path, cfg: TrainConfig, model_cfg: ModelConfig,
                 out_dir: str | Path, resume: str | Path | None = None) -> Path:
    """Train to ``cfg.n_iter`` iterations; returns the final checkpoint path.

    Fresh runs pre-fit the VAE on the dataset frames before the main loop;
    resumed runs restore every piece of mutable state (parameters, optimizer
    moments, both RNG streams, iteration counter) from the checkpoint.
    """
    root = Path(dataset_root)
    report = validate_dataset(root)
    if not report.ok:
        lines = "; ".join(f"{v.sample_id}: {v.message}" for v in report.violations[:8])
        raise DataError(f"dataset failed validation: {lines}")
    human_ids = list_samples(root, domain="human")
    if not human_ids:
        raise DataError("dataset has no human-domain samples to train on")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = M2HModel(model_cfg)
    loop = TrainLoop(model, cfg, root, human_ids)

    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta.get("kind") != "train_state":
            raise ConfigError(f"{resume} is not a training checkpoint")
        if meta.get("model_config") != model_cfg.to_json_obj():
            raise ConfigError("checkpoint/model configuration mismatch")
        if meta.get("train_config") != cfg.to_json_obj():
            raise ConfigError("checkpoint/train configuration mismatch")
        loop.restore(arrays, meta)
    else:
        frames = collect_frames(root, list_samples(root))
        # the progressive phase encodes half-resolution inputs with this VAE;
        # full resolution is weighted up since generation decodes at full res
        fit_vae(model.vae, [frames, frames, downsample_video(frames)],
                steps=cfg.vae_pretrain_steps, lr=cfg.vae_pretrain_lr,
                generator=torch.Generator().manual_seed(cfg.seed + 2))

    log = LossLog(out / "loss_log.csv")
    last_path = out / "ckpt_final.npz"
    while loop.iteration < cfg.n_iter:
        record = loop.step()
        log.append(record)
        if loop.iteration % cfg.checkpoint_every == 0 and loop.iteration < cfg.n_iter:
            loop.save(out / f"ckpt_{loop.iteration:06d}.npz", model_cfg)
    loop.save(last_path, model_cfg)

    from .report import save_loss_curve

    save_loss_curve(out / "loss_log.csv", out / "loss_curve.png")
    return last_path
