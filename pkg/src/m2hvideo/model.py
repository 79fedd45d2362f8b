"""Full generation model: frozen VAE and surrogate embedders around the
trainable pose encoders, head encoder, adapters, and denoising UNet, plus
conditioning preparation and checkpoint (de)serialization.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import BackboneConfig, DenoisingUNet
from .conditioning import HeadEncoder
from .data import ConditionBundle, PoseSequence
from .encoders import (
    DEFAULT_PERCEPTUAL_LAYERS,
    ClothingEmbedder,
    FaceEmbedder,
    FacialPoseEncoder,
    MiniVAE,
    PerceptualExtractor,
    PoseEncoder,
    _seeded,
)
from .errors import ConfigError, ShapeError

FROZEN_SUBMODULES = ("vae", "face_embedder", "clothing_embedder", "perceptual")
TRAINABLE_GROUPS = ("unet", "adapters", "head_encoder", "pose_encoder", "identity_pose_encoder")


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    vae_base_width: int = 48
    face_dim: int = 32
    head_layers: int = 4
    pose_encoder_width: int = 32
    perceptual_layers: tuple[str, ...] = DEFAULT_PERCEPTUAL_LAYERS
    init_seed: int = 1234
    vae_seed: int = 100
    face_seed: int = 200
    clothing_seed: int = 300
    perceptual_seed: int = 400

    def to_json_obj(self) -> dict:
        obj = asdict(self)
        obj["backbone"] = self.backbone.to_json_obj()
        obj["perceptual_layers"] = list(self.perceptual_layers)
        return obj

    @classmethod
    def from_json_obj(cls, obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["backbone"] = BackboneConfig.from_json_obj(obj["backbone"])
        obj["perceptual_layers"] = tuple(obj["perceptual_layers"])
        return cls(**obj)


@dataclass
class PreparedConditioning:
    """Backbone-ready conditioning for one clip."""

    clothing_latent: torch.Tensor    # [N, c_f, h, w]
    pose_features: torch.Tensor      # [N, c_z + c_f, h, w]
    identity_tokens: torch.Tensor    # [N, L_q, id_token_dim]
    clothing_tokens: torch.Tensor    # [N, L_c, clip_token_dim]

    @property
    def num_frames(self) -> int:
        return self.clothing_latent.shape[0]


class M2HModel(nn.Module):
    """The generation module mapping (masked clothing video, identity image,
    poses) and a noisy latent to a noise prediction."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        bb = cfg.backbone
        if bb.clothing_channels != bb.latent_channels:
            raise ConfigError("clothing latent channels must equal the VAE latent channels")

        self.vae = MiniVAE(bb.latent_channels, cfg.vae_base_width, seed=cfg.vae_seed)
        for p in self.vae.parameters():  # pre-fit temporarily re-enables grads
            p.requires_grad_(False)
        self.face_embedder = FaceEmbedder(cfg.face_dim, seed=cfg.face_seed)
        self.clothing_embedder = ClothingEmbedder(bb.clip_token_dim, seed=cfg.clothing_seed)
        self.perceptual = PerceptualExtractor(cfg.perceptual_layers, seed=cfg.perceptual_seed)

        with _seeded(cfg.init_seed):
            self.pose_encoder = PoseEncoder(bb.in_channels, width=cfg.pose_encoder_width)
            self.identity_pose_encoder = FacialPoseEncoder(bb.latent_channels)
            self.head_encoder = HeadEncoder(
                latent_channels=bb.latent_channels, face_dim=cfg.face_dim,
                pose_channels=bb.in_channels, dim=bb.id_token_dim,
                layers=cfg.head_layers, heads=bb.heads)
            self.unet = DenoisingUNet(bb)

    # -- conditioning -------------------------------------------------------

    def prepare_conditioning(self, clothing_pixels: torch.Tensor, identity_image: torch.Tensor,
                             facial_pose: PoseSequence, body_pose: PoseSequence,
                             ) -> PreparedConditioning:
        """Encode raw conditioning inputs once per clip.

        ``clothing_pixels`` is the already-masked source video [N, 3, H, W];
        ``identity_image`` is [1, 3, H, W].
        """
        n, _, height, width = clothing_pixels.shape
        if body_pose.num_frames != n:
            raise ShapeError(
                f"body pose has {body_pose.num_frames} frames, clothing video has {n}")
        with torch.no_grad():  # frozen encoders contribute no gradients
            f_c = self.vae.encode(clothing_pixels)
            f_clip = self.clothing_embedder(clothing_pixels)
            identity_latent = self.vae.encode(identity_image)
            face_vec = self.face_embedder(identity_image)
        pose_features = self.pose_encoder.encode(body_pose, (height, width))
        facial_emb = self.identity_pose_encoder.encode(facial_pose, (height, width))
        identity_tokens = self.head_encoder(
            identity_latent, facial_emb, face_vec, pose_features, n)
        return PreparedConditioning(f_c, pose_features, identity_tokens, f_clip)

    def prepare_from_bundle(self, bundle: ConditionBundle) -> PreparedConditioning:
        to_t = lambda a: torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32))  # noqa: E731
        return self.prepare_conditioning(
            to_t(bundle.clothing_video), to_t(bundle.identity_image),
            bundle.facial_pose, bundle.body_pose)

    # -- denoising ----------------------------------------------------------

    def predict_noise(self, z_t: torch.Tensor, t: int, cond: PreparedConditioning,
                      drop_cond: bool = False) -> torch.Tensor:
        if z_t.shape[0] != cond.num_frames:
            raise ShapeError(
                f"latent has {z_t.shape[0]} frames, conditioning has {cond.num_frames}")
        if z_t.shape[-2:] != cond.clothing_latent.shape[-2:]:
            raise ShapeError("latent and clothing-latent spatial sizes differ")
        x = torch.cat([z_t, cond.clothing_latent], dim=1) + cond.pose_features
        if drop_cond:
            identity_tokens, clothing_tokens = self.unet.null_condition()
        else:
            identity_tokens, clothing_tokens = cond.identity_tokens, cond.clothing_tokens
        return self.unet(x, t, identity_tokens, clothing_tokens, noisy_latent=z_t)

    # -- parameter bookkeeping ----------------------------------------------

    def parameter_groups(self) -> dict[str, list[torch.nn.Parameter]]:
        """Trainable parameters by architectural group."""
        groups: dict[str, list[torch.nn.Parameter]] = {g: [] for g in TRAINABLE_GROUPS}
        for name, p in self.unet.named_parameters():
            groups["adapters" if ".adapter." in name else "unet"].append(p)
        groups["head_encoder"] = list(self.head_encoder.parameters())
        groups["pose_encoder"] = list(self.pose_encoder.parameters())
        groups["identity_pose_encoder"] = list(self.identity_pose_encoder.parameters())
        return groups

    def trainable_parameters(self) -> list[torch.nn.Parameter]:
        return [p for ps in self.parameter_groups().values() for p in ps]

    def frozen_state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for sub in FROZEN_SUBMODULES:
            for k, v in getattr(self, sub).state_dict().items():
                out[f"{sub}.{k}"] = v.detach().cpu().numpy().copy()
        return out

    # -- checkpointing ------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"model.{k}": v.detach().cpu().numpy().copy()
                for k, v in self.state_dict().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        state = {
            k[len("model."):]: torch.from_numpy(np.ascontiguousarray(v))
            for k, v in arrays.items() if k.startswith("model.")
        }
        self.load_state_dict(state, strict=True)


def build_model(cfg: ModelConfig) -> M2HModel:
    return M2HModel(cfg)


def model_from_checkpoint(arrays: dict[str, np.ndarray], meta: dict) -> M2HModel:
    """Rebuild a model from checkpoint contents, validating the stored config."""
    if "model_config" not in meta:
        raise ConfigError("checkpoint metadata lacks model_config")
    cfg = ModelConfig.from_json_obj(meta["model_config"])
    model = M2HModel(cfg)
    model.load_state_arrays(arrays)
    model.eval()
    return model


def check_config_compatible(meta: dict, cfg: ModelConfig) -> None:
    """Raise ConfigError when a checkpoint was produced under a different
    model configuration than the one requested."""
    stored = meta.get("model_config")
    if stored is None:
        raise ConfigError("checkpoint metadata lacks model_config")
    if stored != cfg.to_json_obj():
        raise ConfigError(
            "checkpoint/model configuration mismatch; re-run with the checkpoint's config "
            f"(stored: {stored})")
