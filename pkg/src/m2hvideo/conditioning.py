"""Conditioning mechanisms: the dynamic pose-aware head encoder that fuses
identity appearance, facial pose, and per-frame body pose into identity
tokens, and the distribution-aware adapter that aligns identity-branch
cross-attention statistics to the clothing branch before fusion.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import ShapeError

# keeps the variance differentiable at exactly-constant inputs; the spec'd
# epsilon guard below handles the magnitude of the degenerate case
_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class AdapterConfig:
    """Statistics-alignment knobs. ``stat_axes`` is fixed: per frame and
    channel, over token positions (instance-normalization style)."""

    epsilon_std_guard: float = 1e-5
    stat_axes: str = "per_frame_channel"
    residual_combine: bool = True

    def __post_init__(self):
        if self.epsilon_std_guard <= 0:
            raise ShapeError("epsilon_std_guard must be positive")
        if self.stat_axes != "per_frame_channel":
            raise ShapeError(f"unsupported stat_axes {self.stat_axes!r}")


def _stats(z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    mean = z.mean(dim=2, keepdim=True)
    var = ((z - mean) ** 2).mean(dim=2, keepdim=True)
    return mean, torch.sqrt(var + _VAR_FLOOR)


def align_distribution(z_src: torch.Tensor, z_target: torch.Tensor,
                       cfg: AdapterConfig | None = None) -> torch.Tensor:
    """Affinely re-normalize ``z_src`` so its per-frame per-channel mean and
    (population) standard deviation over positions match ``z_target``.

    Both arrays are [N, C, L]; statistics are taken over the last axis.
    """
    cfg = cfg or AdapterConfig()
    if z_src.shape != z_target.shape:
        raise ShapeError(
            f"align_distribution: shapes {tuple(z_src.shape)} vs {tuple(z_target.shape)}")
    if z_src.ndim != 3:
        raise ShapeError(f"align_distribution expects [N, C, L], got {tuple(z_src.shape)}")
    mu_s, sd_s = _stats(z_src)
    mu_t, sd_t = _stats(z_target)
    return (z_src - mu_s) / (sd_s + cfg.epsilon_std_guard) * sd_t + mu_t


class CrossAttention(nn.Module):
    """Single-projection-set cross-attention; no positional terms are added
    to the conditioning keys/values, so the module is permutation-invariant
    over them."""

    def __init__(self, query_dim: int, kv_dim: int, heads: int = 1,
                 zero_init_out: bool = False):
        super().__init__()
        if query_dim % heads:
            raise ShapeError("query_dim must be divisible by heads")
        self.heads = heads
        self.scale = (query_dim // heads) ** -0.5
        self.to_q = nn.Linear(query_dim, query_dim, bias=False)
        self.to_k = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_v = nn.Linear(kv_dim, query_dim, bias=False)
        self.to_out = nn.Linear(query_dim, query_dim)
        if zero_init_out:
            nn.init.zeros_(self.to_out.weight)
            nn.init.zeros_(self.to_out.bias)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, lq, _ = x.shape
        if context.ndim != 3 or context.shape[0] not in (1, n):
            raise ShapeError(
                f"context must be [N or 1, L, kv_dim], got {tuple(context.shape)}")
        if context.shape[0] == 1 and n > 1:
            context = context.expand(n, -1, -1)
        h = self.heads
        q = self.to_q(x).reshape(n, lq, h, -1).transpose(1, 2)
        k = self.to_k(context).reshape(n, context.shape[1], h, -1).transpose(1, 2)
        v = self.to_v(context).reshape(n, context.shape[1], h, -1).transpose(1, 2)
        attn = torch.softmax(q @ k.transpose(-1, -2) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(n, lq, -1)
        return self.to_out(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class _HeadEncoderBlock(nn.Module):
    """Pre-norm cross-attention (body-pose tokens as key/value) + feed-forward."""

    def __init__(self, dim: int, kv_dim: int, heads: int, ff_mult: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, kv_dim, heads=heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)

    def forward(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), kv)
        return x + self.ff(self.norm2(x))


class HeadEncoder(nn.Module):
    """Dynamic pose-aware head encoder.

    Queries are the channel-concatenation of (identity latent + facial-pose
    embedding) with the spatially broadcast face embedding, flattened to one
    token per latent position and duplicated across frames. Four blocks of
    cross-attention against the matching frame's body-pose tokens followed by
    feed-forward produce per-frame identity token sequences [N, L_q, dim].
    """

    def __init__(self, latent_channels: int, face_dim: int, pose_channels: int,
                 dim: int = 64, layers: int = 4, heads: int = 1, ff_mult: int = 4):
        super().__init__()
        self.dim = dim
        self.face_dim = face_dim
        self.in_proj = nn.Linear(latent_channels + face_dim, dim)
        self.blocks = nn.ModuleList(
            _HeadEncoderBlock(dim, pose_channels, heads, ff_mult) for _ in range(layers))

    def build_queries(self, identity_latent: torch.Tensor, facial_pose_emb: torch.Tensor,
                      face_emb: torch.Tensor) -> torch.Tensor:
        if identity_latent.shape[0] != 1 or identity_latent.shape != facial_pose_emb.shape:
            raise ShapeError(
                "identity latent and facial pose embedding must share a single-frame shape; "
                f"got {tuple(identity_latent.shape)} and {tuple(facial_pose_emb.shape)}")
        if face_emb.ndim != 1 or face_emb.shape[0] != self.face_dim:
            raise ShapeError(f"face embedding must be [{self.face_dim}], got {tuple(face_emb.shape)}")
        _, _, h, w = identity_latent.shape
        fused = identity_latent + facial_pose_emb
        face = face_emb.view(1, -1, 1, 1).expand(1, face_emb.shape[0], h, w)
        tokens = torch.cat([fused, face], dim=1).flatten(2).transpose(1, 2)  # [1, h*w, c]
        return self.in_proj(tokens)

    def forward(self, identity_latent: torch.Tensor, facial_pose_emb: torch.Tensor,
                face_emb: torch.Tensor, body_pose_emb: torch.Tensor,
                frame_count: int) -> torch.Tensor:
        if body_pose_emb.ndim != 4 or body_pose_emb.shape[0] != frame_count:
            raise ShapeError(
                f"body pose embedding must have {frame_count} frames, "
                f"got {tuple(body_pose_emb.shape)}")
        q = self.build_queries(identity_latent, facial_pose_emb, face_emb)
        x = q.expand(frame_count, -1, -1)
        kv = body_pose_emb.flatten(2).transpose(1, 2)  # [N, h'*w', pose_channels]
        for block in self.blocks:
            x = block(x, kv)
        return x


def head_encode(encoder: HeadEncoder, identity_latent: torch.Tensor,
                facial_pose_emb: torch.Tensor, face_emb: torch.Tensor,
                body_pose_emb: torch.Tensor, frame_count: int) -> torch.Tensor:
    """Functional form of :class:`HeadEncoder`."""
    return encoder(identity_latent, facial_pose_emb, face_emb, body_pose_emb, frame_count)


class AdapterBlock(nn.Module):
    """Distribution-aware dual cross-attention adapter.

    Runs two cross-attentions from the same (pre-normed) hidden states, one
    against identity tokens and one against clothing tokens, aligns the
    identity branch's per-channel statistics to the clothing branch, and
    residually fuses both into the hidden states. Output projections start at
    zero, so a fresh block is an exact no-op.
    """

    def __init__(self, channels: int, id_token_dim: int, clip_token_dim: int,
                 cfg: AdapterConfig | None = None, heads: int = 1):
        super().__init__()
        self.cfg = cfg or AdapterConfig()
        self.norm = nn.LayerNorm(channels)
        self.attn_identity = CrossAttention(channels, id_token_dim, heads, zero_init_out=True)
        self.attn_clothing = CrossAttention(channels, clip_token_dim, heads, zero_init_out=True)

    def forward(self, z_self: torch.Tensor, identity_tokens: torch.Tensor,
                clothing_tokens: torch.Tensor, return_branches: bool = False):
        if z_self.ndim != 3:
            raise ShapeError(f"hidden states must be [N, C, L], got {tuple(z_self.shape)}")
        x = self.norm(z_self.transpose(1, 2))                    # [N, L, C]
        z_id = self.attn_identity(x, identity_tokens).transpose(1, 2)    # [N, C, L]
        z_clip = self.attn_clothing(x, clothing_tokens).transpose(1, 2)  # [N, C, L]
        z_id_aligned = align_distribution(z_id, z_clip, self.cfg)
        if self.cfg.residual_combine:
            out = z_self + z_id_aligned + z_clip
        else:
            out = z_id_aligned + z_clip
        if return_branches:
            return out, z_id, z_clip, z_id_aligned
        return out


def adapter_block(block: AdapterBlock, z_self: torch.Tensor, identity_tokens: torch.Tensor,
                  clothing_tokens: torch.Tensor) -> torch.Tensor:
    """Functional form of :class:`AdapterBlock`."""
    return block(z_self, identity_tokens, clothing_tokens)
