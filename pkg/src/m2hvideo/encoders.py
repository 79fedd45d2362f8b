"""Feature encoders: the miniature frozen VAE, the trainable pose and
facial-pose encoders, and fixed-seed surrogate embedders for face identity,
clothing semantics, and perceptual features.

The surrogates stand in for large pretrained networks behind the same
interfaces: anything callable with the documented signature can be plugged in
instead (see README, "Plugging in real embedders").
"""
from __future__ import annotations

import colorsys
import contextlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import PoseSequence
from .draw import disk_alpha, max_blend, segment_alpha
from .errors import ShapeError

DEFAULT_PERCEPTUAL_LAYERS = ("relu1_2", "relu2_2", "relu3_4")


@dataclass(frozen=True)
class EmbedderSpec:
    """Declared contract of one embedder: kind, output dims, weights identity."""

    kind: str
    output_dims: tuple[int, ...]
    weights_ref: str


@contextlib.contextmanager
def _seeded(seed: int):
    """Deterministic module construction without disturbing the caller's RNG."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _freeze(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        p.requires_grad_(False)
    return module.eval()


# ---------------------------------------------------------------------------
# pose rasterization

_JOINT_COLORS = None


def _joint_colors(num_joints: int) -> np.ndarray:
    global _JOINT_COLORS
    if _JOINT_COLORS is None or len(_JOINT_COLORS) != num_joints:
        _JOINT_COLORS = np.array([
            colorsys.hsv_to_rgb((0.618033988749895 * j) % 1.0, 0.85, 1.0)
            for j in range(num_joints)
        ])
    return _JOINT_COLORS


def rasterize_pose(pose: PoseSequence, height: int, width: int,
                   limbs=None, joint_radius: float = 2.0,
                   limb_half_width: float = 0.5) -> np.ndarray:
    """Draw keypoints as anti-aliased colored disks plus limb segments.

    Per-joint colors (fixed palette) collapse the joint set to 3 channels;
    compositing is per-channel max, so draw order is irrelevant. Joints with
    confidence <= 0 are skipped; an all-skipped frame renders as zeros.
    Returns float32 [N, 3, height, width].
    """
    if limbs is None:
        from .data import LIMBS
        limbs = [(pose.joint_names.index(a), pose.joint_names.index(b))
                 for a, b in LIMBS
                 if a in pose.joint_names and b in pose.joint_names]
    colors = _joint_colors(len(pose.joint_names))
    out = np.zeros((pose.num_frames, 3, height, width), dtype=np.float64)
    for n in range(pose.num_frames):
        pts = pose.points[n]
        canvas = out[n]
        for j, (x, y, conf) in enumerate(pts):
            if conf <= 0:
                continue
            max_blend(canvas, disk_alpha(height, width, x, y, joint_radius), colors[j])
        for a, b in limbs:
            if pts[a, 2] <= 0 or pts[b, 2] <= 0:
                continue
            color = (colors[a] + colors[b]) / 2
            alpha = segment_alpha(height, width, pts[a, :2], pts[b, :2], limb_half_width)
            max_blend(canvas, alpha, color)
    return out.astype(np.float32)


class _ZeroPreservingConvStack(nn.Module):
    """Bias-free strided conv stack: maps an all-zero input to all-zero
    features for any parameter values (SiLU(0) = 0, no norms, no bias)."""

    def __init__(self, in_ch: int, widths: tuple[int, ...], out_ch: int):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_ch
        for w in widths:
            layers += [nn.Conv2d(prev, w, 3, stride=2, padding=1, bias=False), nn.SiLU()]
            prev = w
        layers.append(nn.Conv2d(prev, out_ch, 3, padding=1, bias=False))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PoseEncoder(nn.Module):
    """Trainable body-pose encoder: rasterized pose maps -> per-frame feature
    maps [N, out_channels, H/8, W/8]. Empty pose frames encode to zeros.

    The final conv starts at zero: pose features are added onto the latent
    channels, so the backbone sees clean latents until the pathway trains."""

    downsample = 8

    def __init__(self, out_channels: int, width: int = 32):
        super().__init__()
        self.out_channels = out_channels
        self.stack = _ZeroPreservingConvStack(3, (width, width, width), out_channels)
        nn.init.zeros_(self.stack.net[-1].weight)

    def rasterize(self, pose: PoseSequence, size: tuple[int, int]) -> torch.Tensor:
        return torch.from_numpy(rasterize_pose(pose, size[0], size[1]))

    def forward(self, pose_maps: torch.Tensor) -> torch.Tensor:
        if pose_maps.ndim != 4 or pose_maps.shape[1] != 3:
            raise ShapeError(f"pose maps must be [N, 3, H, W], got {tuple(pose_maps.shape)}")
        return self.stack(pose_maps)

    def encode(self, pose: PoseSequence, size: tuple[int, int]) -> torch.Tensor:
        maps = self.rasterize(pose, size).to(next(self.parameters()).dtype)
        return self(maps)


def encode_pose(encoder: PoseEncoder, pose: PoseSequence, size: tuple[int, int]) -> torch.Tensor:
    """Rasterize ``pose`` onto ``size`` = (H, W) and encode to feature maps."""
    return encoder.encode(pose, size)


class FacialPoseEncoder(PoseEncoder):
    """Facial-keypoint encoder; output width matches the identity latent."""

    def __init__(self, latent_channels: int, width: int = 24):
        super().__init__(out_channels=latent_channels, width=width)


# ---------------------------------------------------------------------------
# VAE

class MiniVAE(nn.Module):
    """Small convolutional VAE, downsample factor 8. Encoding is the
    posterior mean (no sampling), so it is deterministic; decoding ends in a
    sigmoid, keeping outputs inside [0, 1] differentiably.

    ``latent_scale`` (calibrated after the pre-fit so latents are unit-scale,
    the usual latent-diffusion convention) multiplies encodings and divides
    decodings; the diffusion process sees only the normalized space."""

    factor = 8

    def __init__(self, latent_channels: int = 4, base_width: int = 48, seed: int = 100):
        super().__init__()
        self.latent_channels = latent_channels
        self.register_buffer("latent_scale", torch.ones(()))
        w = base_width

        def gn(ch):
            return nn.GroupNorm(min(8, ch), ch)

        with _seeded(seed):
            self.encoder = nn.Sequential(
                nn.Conv2d(3, w, 3, stride=2, padding=1), gn(w), nn.SiLU(),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), gn(2 * w), nn.SiLU(),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), gn(4 * w), nn.SiLU(),
                nn.Conv2d(4 * w, 4 * w, 3, padding=1), gn(4 * w), nn.SiLU(),
                nn.Conv2d(4 * w, 2 * latent_channels, 1),
            )
            self.decoder = nn.Sequential(
                nn.Conv2d(latent_channels, 4 * w, 1), gn(4 * w), nn.SiLU(),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(4 * w, 2 * w, 3, padding=1), gn(2 * w), nn.SiLU(),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(2 * w, w, 3, padding=1), gn(w), nn.SiLU(),
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(w, w, 3, padding=1), gn(w), nn.SiLU(),
                nn.Conv2d(w, 3, 3, padding=1),
            )

    def _check_pixel_input(self, v: torch.Tensor) -> None:
        if v.ndim != 4 or v.shape[1] != 3:
            raise ShapeError(f"pixel video must be [N, 3, H, W], got {tuple(v.shape)}")
        if v.shape[2] % self.factor or v.shape[3] % self.factor:
            raise ShapeError(
                f"H and W must be divisible by {self.factor}, got {tuple(v.shape[2:])}")

    def encode_dist(self, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw (unscaled) posterior mean and log-variance; pre-fit internals."""
        self._check_pixel_input(v)
        mean, logvar = self.encoder(v).chunk(2, dim=1)
        return mean, logvar

    def encode(self, v: torch.Tensor) -> torch.Tensor:
        return self.encode_dist(v)[0] * self.latent_scale

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeError(
                f"latent must be [N, {self.latent_channels}, h, w], got {tuple(z.shape)}")
        return torch.sigmoid(self.decoder(z / self.latent_scale))


def fit_vae(vae: MiniVAE, frames: torch.Tensor | list[torch.Tensor], steps: int = 400,
            batch_size: int = 16, lr: float = 2e-3, kl_weight: float = 1e-6,
            generator: torch.Generator | None = None) -> list[float]:
    """Pre-fit the VAE with plain reconstruction + KL, then freeze it.

    ``frames`` is one [M, 3, H, W] stack or a list of stacks at different
    resolutions (progressive training encodes half-resolution inputs with the
    same VAE, so the pre-fit should cover every resolution it will see).
    Returns the per-step loss history.
    """
    groups = [frames] if torch.is_tensor(frames) else list(frames)
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    for p in vae.parameters():
        p.requires_grad_(True)
    with torch.no_grad():
        vae.latent_scale.fill_(1.0)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    history = []
    vae.train()
    for _ in range(steps):
        group = groups[0] if len(groups) == 1 else groups[
            int(torch.randint(len(groups), (1,), generator=generator))]
        idx = torch.randint(0, group.shape[0], (min(batch_size, group.shape[0]),),
                            generator=generator)
        batch = group[idx]
        mean, logvar = vae.encode_dist(batch)
        logvar = logvar.clamp(-12.0, 4.0)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        recon = vae.decode(z)
        kl = 0.5 * torch.mean(mean**2 + logvar.exp() - 1.0 - logvar)
        loss = torch.mean((recon - batch) ** 2) + kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(loss.item())
    # calibrate the normalization so diffusion operates on unit-scale latents
    with torch.no_grad():
        stds = [vae.encode_dist(g[: min(256, g.shape[0])])[0].std() for g in groups]
        raw_std = torch.stack(stds).mean().item()
        vae.latent_scale.fill_(1.0 / max(raw_std, 1e-6))
    _freeze(vae)
    return history


# ---------------------------------------------------------------------------
# fixed-seed surrogate embedders

class FaceEmbedder(nn.Module):
    """Deterministic facial-identity embedder (stands in for a pretrained
    face-recognition network): fixed-seed conv reducer to a d-vector."""

    def __init__(self, dim: int = 32, seed: int = 200, sensitivity: float = 40.0):
        super().__init__()
        self.dim = dim
        self.weights_ref = f"surrogate-face:seed={seed}"
        with _seeded(seed):
            self.features = nn.Sequential(
                nn.Conv2d(3, 24, 3, stride=2, padding=1), nn.Tanh(),
                nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.Tanh(),
                nn.Conv2d(48, 48, 3, stride=2, padding=1), nn.Tanh(),
            )
            # random-Fourier head: sin of a wide random projection separates
            # nearby pooled features, so distinct identities decorrelate
            self.head = nn.Linear(48, dim)
            nn.init.normal_(self.head.weight, std=sensitivity)
            nn.init.uniform_(self.head.bias, 0.0, 2.0 * 3.141592653589793)
        _freeze(self)

    @property
    def spec(self) -> EmbedderSpec:
        return EmbedderSpec("face", (self.dim,), self.weights_ref)

    def forward(self, frame: torch.Tensor) -> torch.Tensor:
        if frame.ndim == 3:
            frame = frame[None]
        if frame.ndim != 4 or frame.shape[0] != 1 or frame.shape[1] != 3:
            raise ShapeError(f"expected a single [1, 3, H, W] frame, got {tuple(frame.shape)}")
        feats = self.features(frame).mean(dim=(2, 3))
        return torch.sin(self.head(feats))[0]


class ClothingEmbedder(nn.Module):
    """Deterministic clothing-semantics embedder (stands in for a pretrained
    vision-language encoder): per-frame token sequences [N, L, dim] from
    already-masked clothing frames."""

    def __init__(self, dim: int = 32, seed: int = 300):
        super().__init__()
        self.dim = dim
        self.weights_ref = f"surrogate-clothing:seed={seed}"
        with _seeded(seed):
            self.features = nn.Sequential(
                nn.Conv2d(3, 24, 3, stride=2, padding=1), nn.Tanh(),
                nn.Conv2d(24, 48, 3, stride=2, padding=1), nn.Tanh(),
                nn.Conv2d(48, dim, 3, stride=2, padding=1),
            )
        _freeze(self)

    @property
    def spec(self) -> EmbedderSpec:
        return EmbedderSpec("clothing_semantic", (self.dim,), self.weights_ref)

    def forward(self, masked_video: torch.Tensor) -> torch.Tensor:
        if masked_video.ndim != 4 or masked_video.shape[1] != 3:
            raise ShapeError(
                f"masked video must be [N, 3, H, W], got {tuple(masked_video.shape)}")
        feats = self.features(masked_video)                 # [N, dim, h, w]
        return feats.flatten(2).transpose(1, 2)             # [N, h*w, dim]


class PerceptualExtractor(nn.Module):
    """Fixed three-level feature pyramid at strides 1, 2, 4, exposed under
    configurable layer names so a pretrained extractor with the same naming
    can be swapped in."""

    def __init__(self, layer_names: tuple[str, ...] = DEFAULT_PERCEPTUAL_LAYERS,
                 seed: int = 400):
        super().__init__()
        if len(layer_names) != 3:
            raise ShapeError("perceptual extractor exposes exactly 3 layers")
        self.layer_names = tuple(layer_names)
        self.weights_ref = f"surrogate-perceptual:seed={seed}"
        with _seeded(seed):
            self.level1 = nn.Sequential(nn.Conv2d(3, 16, 3, padding=1), nn.Tanh())
            self.level2 = nn.Sequential(
                nn.AvgPool2d(2), nn.Conv2d(16, 24, 3, padding=1), nn.Tanh())
            self.level3 = nn.Sequential(
                nn.AvgPool2d(2), nn.Conv2d(24, 32, 3, padding=1), nn.Tanh())
        _freeze(self)

    @property
    def spec(self) -> EmbedderSpec:
        return EmbedderSpec("perceptual", (16, 24, 32), self.weights_ref)

    def forward(self, frame: torch.Tensor) -> list[torch.Tensor]:
        if frame.ndim == 3:
            frame = frame[None]
        if frame.ndim != 4 or frame.shape[1] != 3:
            raise ShapeError(f"expected [N, 3, H, W] input, got {tuple(frame.shape)}")
        f1 = self.level1(frame)
        f2 = self.level2(f1)
        f3 = self.level3(f2)
        return [f1, f2, f3]
