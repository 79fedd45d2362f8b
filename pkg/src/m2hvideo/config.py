"""Declarative run configuration.

Config files use a small dotted key-tree grammar (one assignment per line):

    # comment
    train.n_iter = 500
    model.channel_multipliers = [1, 2, 4]
    data.frames = 32
    eval.mask_scope = "clothing_region"

Values parse as int, float, true/false, [scalar, ...] lists, or strings
(quotes optional). Dots build the tree; the top level must be one of the
sections data / model / train / infer / eval. Unknown keys are rejected.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .backbone import BackboneConfig
from .data import SynthSpec
from .errors import ConfigError, DataError, ShapeError
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = ("data", "model", "train", "infer", "eval")


def _parse_scalar(token: str):
    token = token.strip()
    if not token:
        raise ConfigError("empty value")
    if token.lower() in ("true", "false"):
        return token.lower() == "true"
    if (token[0] == token[-1] == '"') or (token[0] == token[-1] == "'"):
        return token[1:-1]
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return float(token)
    except ValueError:
        pass
    return token


def _parse_value(token: str):
    token = token.strip()
    if token.startswith("["):
        if not token.endswith("]"):
            raise ConfigError(f"unterminated list: {token!r}")
        inner = token[1:-1].strip()
        if not inner:
            return []
        return [_parse_scalar(part) for part in inner.split(",")]
    return _parse_scalar(token)


def parse_config_text(text: str) -> dict:
    """Parse the key-tree grammar into nested dicts."""
    tree: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        parts = [p.strip() for p in key.strip().split(".")]
        if not all(parts):
            raise ConfigError(f"line {lineno}: malformed key {key.strip()!r}")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"line {lineno}: key {key.strip()!r} conflicts with a value")
        if parts[-1] in node and isinstance(node[parts[-1]], dict):
            raise ConfigError(f"line {lineno}: key {key.strip()!r} conflicts with a subtree")
        node[parts[-1]] = _parse_value(value)
    return tree


def _build_dataclass(cls, mapping: dict, section: str, tuple_fields=()):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(mapping) - known)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {unknown}; known: {sorted(known)}")
    kwargs = dict(mapping)
    for name in tuple_fields:
        if name in kwargs:
            value = kwargs[name]
            kwargs[name] = tuple(value) if isinstance(value, list) else (value,)
    try:
        return cls(**kwargs)
    except (TypeError, DataError, ShapeError) as exc:
        raise ConfigError(f"invalid {section} section: {exc}") from exc


@dataclass(frozen=True)
class InferDefaults:
    steps: int = 50
    guidance_scale: float = 7.5
    seed: int = 0
    denoised_clamp: float = 4.0


@dataclass(frozen=True)
class EvalDefaults:
    mask_scope: str = "clothing_region"
    method: str = "m2hvideo"

    def __post_init__(self):
        if self.mask_scope not in ("clothing_region", "full_frame"):
            raise ConfigError(f"mask_scope must be clothing_region or full_frame, "
                              f"got {self.mask_scope!r}")


_MODEL_OWN_KEYS = ("vae_base_width", "face_dim", "head_layers", "pose_encoder_width",
                   "perceptual_layers", "init_seed", "vae_seed", "face_seed",
                   "clothing_seed", "perceptual_seed")


def _build_model_config(mapping: dict) -> ModelConfig:
    """The model section flattens BackboneConfig and ModelConfig keys."""
    backbone_known = {f.name for f in fields(BackboneConfig)} - {"adapter"}
    own = {k: v for k, v in mapping.items() if k in _MODEL_OWN_KEYS}
    bb = {k: v for k, v in mapping.items() if k in backbone_known}
    unknown = sorted(set(mapping) - set(own) - set(bb))
    if unknown:
        raise ConfigError(
            f"unknown model keys: {unknown}; known: {sorted(backbone_known | set(_MODEL_OWN_KEYS))}")
    backbone = _build_dataclass(
        BackboneConfig, bb, "model",
        tuple_fields=("channel_multipliers", "attention_levels"))
    model = _build_dataclass(ModelConfig, own, "model", tuple_fields=("perceptual_layers",))
    return replace(model, backbone=backbone)


@dataclass(frozen=True)
class RunConfig:
    data: SynthSpec = field(default_factory=SynthSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferDefaults = field(default_factory=InferDefaults)
    eval: EvalDefaults = field(default_factory=EvalDefaults)

    def validate(self) -> "RunConfig":
        from .encoders import MiniVAE

        factor = MiniVAE.factor
        if self.data.height % factor or self.data.width % factor:
            raise ConfigError(
                f"data resolution {self.data.height}x{self.data.width} must be divisible "
                f"by the VAE factor {factor}")
        span = self.train.window_span
        if self.data.frames < span:
            raise ConfigError(
                f"data.frames ({self.data.frames}) shorter than the training window "
                f"({span} frames)")
        if self.train.frames_per_clip != self.model.backbone.num_frames:
            raise ConfigError(
                f"train.frames_per_clip ({self.train.frames_per_clip}) must equal "
                f"model num_frames ({self.model.backbone.num_frames})")
        if self.train.diffusion_steps != self.model.backbone.num_diffusion_steps:
            raise ConfigError(
                f"train.diffusion_steps ({self.train.diffusion_steps}) must equal "
                f"model num_diffusion_steps ({self.model.backbone.num_diffusion_steps})")
        return self


def run_config_from_tree(tree: dict) -> RunConfig:
    unknown = sorted(set(tree) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}; expected {list(SECTIONS)}")
    for name in SECTIONS:
        if name in tree and not isinstance(tree[name], dict):
            raise ConfigError(f"section {name!r} must hold keys, not a bare value")
    cfg = RunConfig(
        data=_build_dataclass(SynthSpec, tree.get("data", {}), "data"),
        model=_build_model_config(tree.get("model", {})),
        train=_build_dataclass(TrainConfig, tree.get("train", {}), "train"),
        infer=_build_dataclass(InferDefaults, tree.get("infer", {}), "infer"),
        eval=_build_dataclass(EvalDefaults, tree.get("eval", {}), "eval"),
    )
    return cfg.validate()


def load_run_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return run_config_from_tree(parse_config_text(p.read_text()))
