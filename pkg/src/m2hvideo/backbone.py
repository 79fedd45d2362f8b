"""Denoising UNet over frame batches [N, C, h, w]: channel-concatenated
clothing latents plus additive pose features at the input, spatial attention
blocks hosting the distribution-aware adapter, and a zero-initialized
temporal attention layer after each spatial attention block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import AdapterBlock, AdapterConfig, CrossAttention, FeedForward
from .diffusion import cosine_alpha_bar
from .errors import RangeError, ShapeError


@dataclass(frozen=True)
class BackboneConfig:
    latent_channels: int = 4            # c_z, also the output width
    clothing_channels: int = 4          # c_f; input takes c_z + c_f
    base_width: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    attention_levels: tuple[int, ...] = (1, 2)   # indices into the multipliers
    num_frames: int = 8
    temporal_zero_init: bool = True
    id_token_dim: int = 64
    clip_token_dim: int = 32
    heads: int = 1
    null_token_count: int = 8
    num_diffusion_steps: int = 1000
    adapter: AdapterConfig = field(default_factory=AdapterConfig)

    def __post_init__(self):
        if self.num_frames < 1:
            raise ShapeError("num_frames must be >= 1")
        if any(lvl >= len(self.channel_multipliers) for lvl in self.attention_levels):
            raise ShapeError("attention level index out of range")

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.clothing_channels

    def to_json_obj(self) -> dict:
        return {
            "latent_channels": self.latent_channels,
            "clothing_channels": self.clothing_channels,
            "base_width": self.base_width,
            "channel_multipliers": list(self.channel_multipliers),
            "attention_levels": list(self.attention_levels),
            "num_frames": self.num_frames,
            "temporal_zero_init": self.temporal_zero_init,
            "id_token_dim": self.id_token_dim,
            "clip_token_dim": self.clip_token_dim,
            "heads": self.heads,
            "null_token_count": self.null_token_count,
            "num_diffusion_steps": self.num_diffusion_steps,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "BackboneConfig":
        obj = dict(obj)
        obj["channel_multipliers"] = tuple(obj["channel_multipliers"])
        obj["attention_levels"] = tuple(obj["attention_levels"])
        return cls(**obj)


def _norm_groups(channels: int) -> int:
    for g in (8, 4, 2, 1):
        if channels % g == 0:
            return g
    return 1


def timestep_embedding(t: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal scalar-timestep embedding of width ``dim``."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    args = t * freqs
    emb = torch.cat([torch.cos(args), torch.sin(args)])
    if dim % 2:
        emb = torch.cat([emb, torch.zeros(1, dtype=dtype)])
    return emb


def _frame_encoding(n: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal frame-index encoding [n, dim] for temporal attention."""
    half = (dim + 1) // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=dtype) / max(half - 1, 1))
    args = torch.arange(n, dtype=dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)[:, :dim]


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_norm_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_norm_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[None, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SpatialBlock(nn.Module):
    """Self-attention over spatial positions followed by the dual
    cross-attention adapter and a feed-forward, all residual."""

    def __init__(self, channels: int, cfg: BackboneConfig):
        super().__init__()
        self.norm_in = nn.GroupNorm(_norm_groups(channels), channels)
        self.norm_self = nn.LayerNorm(channels)
        self.self_attn = CrossAttention(channels, channels, heads=cfg.heads)
        self.adapter = AdapterBlock(channels, cfg.id_token_dim, cfg.clip_token_dim,
                                    cfg.adapter, heads=cfg.heads)
        self.norm_ff = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)

    def forward(self, x: torch.Tensor, identity_tokens: torch.Tensor,
                clothing_tokens: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = self.norm_in(x).flatten(2).transpose(1, 2)        # [N, L, C]
        y = self.norm_self(tokens)
        tokens = tokens + self.self_attn(y, y)
        fused = self.adapter(tokens.transpose(1, 2), identity_tokens, clothing_tokens)
        tokens = fused.transpose(1, 2)
        tokens = tokens + self.ff(self.norm_ff(tokens))
        return x + tokens.transpose(1, 2).reshape(n, c, h, w)


class TemporalAttention(nn.Module):
    """Attention across the frame axis at each spatial location. With the
    output projection zero-initialized the layer is an exact identity, so an
    untrained backbone treats frames independently."""

    def __init__(self, channels: int, zero_init: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(channels, channels, bias=False)
        self.to_v = nn.Linear(channels, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5
        if zero_init:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n, c, h, w = x.shape
        tokens = x.permute(2, 3, 0, 1).reshape(h * w, n, c)
        y = self.norm(tokens) + _frame_encoding(n, c, x.dtype)[None]
        attn = torch.softmax(self.to_q(y) @ self.to_k(y).transpose(-1, -2) * self.scale, dim=-1)
        out = self.to_out(attn @ self.to_v(y))
        return x + out.reshape(h, w, n, c).permute(2, 3, 0, 1)


class _Stage(nn.Module):
    """One resolution level: residual block, optional spatial attention with
    its trailing temporal layer, optional resampler."""

    def __init__(self, in_ch: int, out_ch: int, time_dim: int, cfg: BackboneConfig,
                 use_attn: bool, resampler: nn.Module | None):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, time_dim)
        self.spatial = SpatialBlock(out_ch, cfg) if use_attn else None
        self.temporal = TemporalAttention(out_ch, cfg.temporal_zero_init) if use_attn else None
        self.resampler = resampler

    def forward(self, h, temb, identity_tokens, clothing_tokens):
        h = self.res(h, temb)
        if self.spatial is not None:
            h = self.spatial(h, identity_tokens, clothing_tokens)
            h = self.temporal(h)
        return h


class DenoisingUNet(nn.Module):
    """Predicts the added noise for one clip of latent frames.

    The prediction is parameterized as a zero-initialized residual on top of
    the analytic unconditional optimum for unit-variance latents,
    sqrt(1 - alpha_bar_t) * z_t, so a fresh network already denoises pure
    noise correctly and training capacity goes into the conditional part.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self._eps_scale = [
            math.sqrt(1.0 - cosine_alpha_bar(t, cfg.num_diffusion_steps))
            for t in range(cfg.num_diffusion_steps + 1)
        ]
        widths = [cfg.base_width * m for m in cfg.channel_multipliers]
        time_dim = cfg.base_width * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.base_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim))
        self.conv_in = nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1)

        self.down_stages = nn.ModuleList()
        prev = widths[0]
        for i, w in enumerate(widths):
            down = nn.Conv2d(w, w, 3, stride=2, padding=1) if i < len(widths) - 1 else None
            self.down_stages.append(
                _Stage(prev, w, time_dim, cfg, i in cfg.attention_levels, down))
            prev = w

        self.mid_res1 = ResBlock(widths[-1], widths[-1], time_dim)
        self.mid_spatial = SpatialBlock(widths[-1], cfg)
        self.mid_temporal = TemporalAttention(widths[-1], cfg.temporal_zero_init)
        self.mid_res2 = ResBlock(widths[-1], widths[-1], time_dim)

        self.up_stages = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            above = widths[i + 1] if i < len(widths) - 1 else widths[-1]
            up = nn.Conv2d(above, above, 3, padding=1) if i < len(widths) - 1 else None
            self.up_stages.append(
                _Stage(above + w, w, time_dim, cfg, i in cfg.attention_levels, up))

        self.norm_out = nn.GroupNorm(_norm_groups(widths[0]), widths[0])
        self.conv_out = nn.Conv2d(widths[0], cfg.latent_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)  # predictions start at zero
        nn.init.zeros_(self.conv_out.bias)

        self.null_identity_tokens = nn.Parameter(
            0.02 * torch.randn(1, cfg.null_token_count, cfg.id_token_dim))
        self.null_clothing_tokens = nn.Parameter(
            0.02 * torch.randn(1, cfg.null_token_count, cfg.clip_token_dim))

    def null_condition(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Learned null token sequences substituting the identity and
        clothing conditioning for the guidance-free branch."""
        return self.null_identity_tokens, self.null_clothing_tokens

    def forward(self, x: torch.Tensor, t: int, identity_tokens: torch.Tensor,
                clothing_tokens: torch.Tensor,
                noisy_latent: torch.Tensor | None = None) -> torch.Tensor:
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"backbone input must be [N, {cfg.in_channels}, h, w], got {tuple(x.shape)}")
        if identity_tokens.shape[0] not in (1, x.shape[0]) or \
           clothing_tokens.shape[0] not in (1, x.shape[0]):
            raise ShapeError("conditioning token frame counts do not match the input")
        if not 0 <= t <= cfg.num_diffusion_steps:
            raise RangeError(f"timestep {t} outside [0, {cfg.num_diffusion_steps}]")
        if noisy_latent is None:
            noisy_latent = x[:, : cfg.latent_channels]
        temb = self.time_mlp(timestep_embedding(t, cfg.base_width, x.dtype))

        h = self.conv_in(x)
        skips = []
        for stage in self.down_stages:
            h = stage(h, temb, identity_tokens, clothing_tokens)
            skips.append(h)
            if stage.resampler is not None:
                h = stage.resampler(h)

        h = self.mid_res1(h, temb)
        h = self.mid_spatial(h, identity_tokens, clothing_tokens)
        h = self.mid_temporal(h)
        h = self.mid_res2(h, temb)

        for stage in self.up_stages:
            skip = skips.pop()
            if stage.resampler is not None:
                h = stage.resampler(F.interpolate(h, size=skip.shape[-2:], mode="nearest"))
            h = torch.cat([h, skip], dim=1)
            h = stage(h, temb, identity_tokens, clothing_tokens)

        return self._eps_scale[t] * noisy_latent + self.conv_out(F.silu(self.norm_out(h)))
