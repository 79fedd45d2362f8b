"""Dataset tooling: on-disk sample layout, a deterministic synthetic
paired-video generator, validation, and loaders.

Directory layout per sample (all paths relative to the dataset root):

    <sample_id>/
        frames/%05d.png        RGB frames
        masks/%05d.png         clothing masks, values {0, 255}
        face_masks/%05d.png    face masks (human-domain samples only)
        pose.json              per-frame 18-joint keypoints [x, y, confidence]
        identity.png           reference identity frame
        facial_pose.json       facial keypoints for identity.png (1 frame)
        meta.json              num_frames, width, height, fps, domain, ...
    manifest.json              sample ids and domains at the root

Videos load as float32 arrays [N, 3, H, W] in [0, 1]; masks as [N, 1, H, W]
in {0, 1}.
"""
from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .draw import disk_alpha, over, segment_alpha
from .errors import DataError

JOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)

FACE_JOINT_NAMES = ("nose", "r_eye", "l_eye", "r_ear", "l_ear")

LIMBS = (
    ("neck", "r_shoulder"), ("neck", "l_shoulder"),
    ("r_shoulder", "r_elbow"), ("r_elbow", "r_wrist"),
    ("l_shoulder", "l_elbow"), ("l_elbow", "l_wrist"),
    ("neck", "r_hip"), ("r_hip", "r_knee"), ("r_knee", "r_ankle"),
    ("neck", "l_hip"), ("l_hip", "l_knee"), ("l_knee", "l_ankle"),
    ("neck", "nose"),
    ("nose", "r_eye"), ("r_eye", "r_ear"),
    ("nose", "l_eye"), ("l_eye", "l_ear"),
)


@dataclass
class PoseSequence:
    """Per-frame 2-D keypoints with confidences, shape [N, J, 3] as (x, y, c)."""

    joint_names: tuple[str, ...]
    points: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim != 3 or self.points.shape[1:] != (len(self.joint_names), 3):
            raise DataError(f"pose points must be [N, {len(self.joint_names)}, 3]")

    @property
    def num_frames(self) -> int:
        return self.points.shape[0]

    def frames(self, indices) -> "PoseSequence":
        return PoseSequence(self.joint_names, self.points[list(indices)])

    def select_joints(self, names) -> "PoseSequence":
        idx = [self.joint_names.index(n) for n in names]
        return PoseSequence(tuple(names), self.points[:, idx])

    def scaled(self, factor: float) -> "PoseSequence":
        pts = self.points.copy()
        pts[:, :, :2] *= factor
        return PoseSequence(self.joint_names, pts)

    def to_json_obj(self) -> dict:
        return {"joints": list(self.joint_names), "frames": self.points.tolist()}

    @classmethod
    def from_json_obj(cls, obj: dict) -> "PoseSequence":
        try:
            return cls(tuple(obj["joints"]), np.asarray(obj["frames"], dtype=np.float64))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed pose record: {exc}") from exc


@dataclass
class ConditionBundle:
    """Conditioning inputs for one sample window.

    clothing_mask: [N, 1, H, W] in {0, 1}; identity_image: [1, 3, H, W];
    facial_pose: 1-frame PoseSequence; body_pose: N-frame PoseSequence;
    clothing_video: the already-masked source frames [N, 3, H, W].
    """

    clothing_mask: np.ndarray
    identity_image: np.ndarray
    facial_pose: PoseSequence
    body_pose: PoseSequence
    clothing_video: np.ndarray

    def __post_init__(self):
        n = self.clothing_mask.shape[0]
        vals = np.unique(self.clothing_mask)
        if not np.all(np.isin(vals, (0.0, 1.0))):
            raise DataError("clothing mask must be binary {0, 1}")
        if self.body_pose.num_frames != n or self.clothing_video.shape[0] != n:
            raise DataError("frame counts inconsistent across conditioning inputs")
        if self.facial_pose.num_frames != 1 or self.identity_image.shape[0] != 1:
            raise DataError("identity image and facial pose must be single-frame")


@dataclass
class SampleRecord:
    """Resolved paths plus metadata for one dataset sample."""

    sample_id: str
    frames_dir: Path
    masks_dir: Path
    pose_file: Path
    identity_image: Path
    facial_pose_file: Path
    face_mask_dir: Path | None
    meta: dict

    @classmethod
    def from_dir(cls, root: str | Path, sample_id: str) -> "SampleRecord":
        base = Path(root) / sample_id
        meta_path = base / "meta.json"
        if not meta_path.exists():
            raise DataError(f"sample {sample_id}: missing meta.json")
        meta = json.loads(meta_path.read_text())
        face_dir = base / "face_masks"
        return cls(
            sample_id=sample_id,
            frames_dir=base / "frames",
            masks_dir=base / "masks",
            pose_file=base / "pose.json",
            identity_image=base / "identity.png",
            facial_pose_file=base / "facial_pose.json",
            face_mask_dir=face_dir if face_dir.is_dir() else None,
            meta=meta,
        )


# ---------------------------------------------------------------------------
# image / pose I/O

def read_image(path: str | Path) -> np.ndarray:
    """Load an RGB image as float32 [3, H, W] in [0, 1]."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing image file: {p}")
    arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Save float [3, H, W] in [0, 1] (or [1, H, W]) as PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 3 and arr.shape[0] in (1, 3):
        arr = arr.transpose(1, 2, 0)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    data = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path)


def read_mask(path: str | Path) -> np.ndarray:
    """Load a binary mask as float32 [1, H, W] in {0, 1}."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing mask file: {p}")
    arr = np.asarray(Image.open(p).convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.float32)[None]


def read_pose_file(path: str | Path) -> PoseSequence:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing pose file: {p}")
    try:
        obj = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"pose file {p} does not parse: {exc}") from exc
    return PoseSequence.from_json_obj(obj)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def read_video_dir(path: str | Path, indices=None) -> np.ndarray:
    """Stack the sorted PNG frames under ``path`` into [N, 3, H, W]."""
    p = Path(path)
    files = sorted(p.glob("*.png"))
    if not files:
        raise DataError(f"no PNG frames under {p}")
    if indices is not None:
        try:
            files = [files[i] for i in indices]
        except IndexError as exc:
            raise DataError(f"frame index out of range under {p}: {exc}") from exc
    return np.stack([read_image(f) for f in files])


def read_mask_dir(path: str | Path, indices=None) -> np.ndarray:
    p = Path(path)
    files = sorted(p.glob("*.png"))
    if not files:
        raise DataError(f"no PNG masks under {p}")
    if indices is not None:
        try:
            files = [files[i] for i in indices]
        except IndexError as exc:
            raise DataError(f"mask index out of range under {p}: {exc}") from exc
    return np.stack([read_mask(f) for f in files])


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass
class SynthSpec:
    """Parameters of the procedural paired human/mannequin video generator."""

    seed: int = 0
    num_samples: int = 2            # number of human/mannequin pairs
    frames: int = 32
    height: int = 64
    width: int = 32
    identity_palette_size: int = 6
    fps: float = 8.0
    sway_amplitude: float = 3.0     # horizontal sway, pixels
    sway_period: float = 32.0       # frames per sway cycle
    turn_amplitude: float = 0.35    # fractional x-compression at max turn
    turn_period: float = 32.0       # frames per turn cycle

    def __post_init__(self):
        if self.frames < 29:
            raise DataError("frames must be >= 29 (training frame-sampler needs 29)")
        if self.height % 2 or self.width % 2:
            raise DataError("resolution must be even")

    def max_joint_step(self) -> float:
        """Analytic bound on per-frame joint displacement (pixels)."""
        sway = self.sway_amplitude * 2 * math.pi / self.sway_period
        # widest joint offset from the spine axis (wrists, 4.25 reference units)
        extent = 4.25 * self.height / 64.0
        turn = extent * self.turn_amplitude * math.pi / self.turn_period
        return sway + turn


def _base_skeleton(width: int, height: int) -> dict[str, tuple[float, float]]:
    """Joint positions for a standing figure, in pixel units."""
    cx = width / 2.0
    u = height / 64.0  # lay out against a 64-tall reference figure
    return {
        "nose": (cx, 10 * u), "neck": (cx, 18 * u),
        "r_shoulder": (cx - 6 * u / 2, 20 * u), "l_shoulder": (cx + 6 * u / 2, 20 * u),
        "r_elbow": (cx - 7.5 * u / 2, 29 * u), "l_elbow": (cx + 7.5 * u / 2, 29 * u),
        "r_wrist": (cx - 8.5 * u / 2, 38 * u), "l_wrist": (cx + 8.5 * u / 2, 38 * u),
        "r_hip": (cx - 3.5 * u / 2, 38 * u), "l_hip": (cx + 3.5 * u / 2, 38 * u),
        "r_knee": (cx - 4 * u / 2, 50 * u), "l_knee": (cx + 4 * u / 2, 50 * u),
        "r_ankle": (cx - 4.5 * u / 2, 61 * u), "l_ankle": (cx + 4.5 * u / 2, 61 * u),
        "r_eye": (cx - 2 * u / 2, 9 * u), "l_eye": (cx + 2 * u / 2, 9 * u),
        "r_ear": (cx - 3.6 * u / 2, 10 * u), "l_ear": (cx + 3.6 * u / 2, 10 * u),
    }


@dataclass
class _PairLook:
    identity_id: int
    head_color: tuple[float, float, float]
    stripe_a: tuple[float, float, float]
    stripe_b: tuple[float, float, float]
    background: float
    sway_phase: float
    turn_phase: float


SKIN_COLOR = (0.87, 0.72, 0.58)
MANNEQUIN_HEAD_COLOR = (0.62, 0.62, 0.62)
HEAD_RADIUS_UNITS = 5.5  # in 64-tall reference units


def _pair_look(rng: np.random.Generator, spec: SynthSpec) -> _PairLook:
    identity_id = int(rng.integers(spec.identity_palette_size))
    hue = (0.07 + 0.618033988749895 * identity_id) % 1.0
    head = colorsys.hsv_to_rgb(hue, 0.75, 0.85)
    hue_a = float(rng.uniform(0, 1))
    hue_b = (hue_a + float(rng.uniform(0.25, 0.55))) % 1.0
    stripe_a = colorsys.hsv_to_rgb(hue_a, 0.7, float(rng.uniform(0.55, 0.9)))
    stripe_b = colorsys.hsv_to_rgb(hue_b, 0.7, float(rng.uniform(0.55, 0.9)))
    return _PairLook(
        identity_id=identity_id,
        head_color=head,
        stripe_a=stripe_a,
        stripe_b=stripe_b,
        background=float(rng.uniform(0.82, 0.92)),
        sway_phase=float(rng.uniform(0, 2 * math.pi)),
        turn_phase=float(rng.uniform(0, 2 * math.pi)),
    )


def _frame_geometry(spec: SynthSpec, look: _PairLook, t: int):
    """Per-frame sway offset and turn compression factor."""
    dx = spec.sway_amplitude * math.sin(2 * math.pi * t / spec.sway_period + look.sway_phase)
    s = 1.0 - spec.turn_amplitude * (1.0 - math.cos(2 * math.pi * t / spec.turn_period + look.turn_phase)) / 2.0
    return dx, s


def _render_pair_frame(spec: SynthSpec, look: _PairLook, t: int, mannequin: bool):
    """Render one frame; returns (frame [3,H,W], clothing mask, face mask, joints [18,3])."""
    h, w = spec.height, spec.width
    cx = w / 2.0
    u = h / 64.0
    dx, s = _frame_geometry(spec, look, t)

    base = _base_skeleton(w, h)
    joints = np.zeros((len(JOINT_NAMES), 3))
    pos = {}
    for j, name in enumerate(JOINT_NAMES):
        x0, y0 = base[name]
        x = cx + (x0 - cx) * s + dx
        pos[name] = (x, y0)
        joints[j] = (x, y0, 1.0)

    canvas = np.full((3, h, w), look.background, dtype=np.float64)

    # limbs (identical in both domains)
    for a, b in LIMBS:
        if a in ("nose", "r_eye", "l_eye") or b in ("nose", "r_eye", "l_eye", "r_ear", "l_ear"):
            continue  # face links are annotation-only, not drawn
        over(canvas, segment_alpha(h, w, pos[a], pos[b], 0.9 * u), SKIN_COLOR)

    # torso rectangle with stripe texture; integer bounds so the mask is exact
    half_w = 7 * u
    x0 = int(round(cx + (-half_w) * s + dx))
    x1 = int(round(cx + half_w * s + dx))
    y0, y1 = int(round(20 * u)), int(round(39 * u))
    x0, x1 = max(x0, 0), min(x1, w)
    mask = np.zeros((h, w), dtype=np.float64)
    mask[y0:y1, x0:x1] = 1.0
    stripe_h = max(int(round(8 * u)), 2)
    for row in range(y0, y1):
        color = look.stripe_a if ((row - y0) // stripe_h) % 2 == 0 else look.stripe_b
        canvas[:, row, x0:x1] = np.array(color)[:, None]

    # head disk; the ONLY pixels that differ between the paired domains
    hx, hy = pos["nose"]
    radius = HEAD_RADIUS_UNITS * u
    head_alpha = disk_alpha(h, w, hx, hy, radius)
    head_color = MANNEQUIN_HEAD_COLOR if mannequin else look.head_color
    over(canvas, head_alpha, head_color)
    if not mannequin:
        for eye in ("r_eye", "l_eye"):
            ex, ey = pos[eye]
            over(canvas, disk_alpha(h, w, ex, ey, 0.8 * u), (0.08, 0.08, 0.08))

    face_mask = (np.sqrt(
        (np.arange(w)[None, :] - hx) ** 2 + (np.arange(h)[:, None] - hy) ** 2
    ) <= radius).astype(np.float64)

    return canvas.astype(np.float32), mask, face_mask, joints


def _head_bbox(spec: SynthSpec, look: _PairLook) -> list[int]:
    h, w = spec.height, spec.width
    u = h / 64.0
    radius = HEAD_RADIUS_UNITS * u
    base = _base_skeleton(w, h)
    nx, ny = base["nose"]
    xs = [nx + _frame_geometry(spec, look, t)[0] for t in range(spec.frames)]
    margin = radius + 1.5
    return [
        max(int(math.floor(min(xs) - margin)), 0),
        max(int(math.floor(ny - margin)), 0),
        min(int(math.ceil(max(xs) + margin)) + 1, w),
        min(int(math.ceil(ny + margin)) + 1, h),
    ]


def generate_synthetic(spec: SynthSpec, out_dir: str | Path) -> dict:
    """Emit ``spec.num_samples`` paired human/mannequin videos; returns the manifest.

    Fully deterministic per seed: identical specs produce byte-identical trees.
    """
    root = Path(out_dir)
    try:
        root.mkdir(parents=True, exist_ok=True)
        probe = root / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise DataError(f"output directory not writable: {root}: {exc}") from exc

    rng = np.random.default_rng(spec.seed)
    samples = []
    for i in range(spec.num_samples):
        look = _pair_look(rng, spec)
        for domain in ("human", "mannequin"):
            sid = f"{domain}_{i:04d}"
            base = root / sid
            (base / "frames").mkdir(parents=True, exist_ok=True)
            (base / "masks").mkdir(exist_ok=True)
            if domain == "human":
                (base / "face_masks").mkdir(exist_ok=True)

            joints_all = np.zeros((spec.frames, len(JOINT_NAMES), 3))
            for t in range(spec.frames):
                frame, mask, fmask, joints = _render_pair_frame(spec, look, t, domain == "mannequin")
                joints_all[t] = joints
                write_image(base / "frames" / f"{t:05d}.png", frame)
                write_image(base / "masks" / f"{t:05d}.png", mask[None])
                if domain == "human":
                    write_image(base / "face_masks" / f"{t:05d}.png", fmask[None])
                if t == 0:
                    write_image(base / "identity.png", frame)

            pose = PoseSequence(JOINT_NAMES, joints_all)
            _write_json(base / "pose.json", pose.to_json_obj())
            facial = pose.frames([0]).select_joints(FACE_JOINT_NAMES)
            _write_json(base / "facial_pose.json", facial.to_json_obj())
            meta = {
                "sample_id": sid,
                "num_frames": spec.frames,
                "width": spec.width,
                "height": spec.height,
                "fps": spec.fps,
                "domain": domain,
                "identity_id": look.identity_id,
                "pair_id": i,
                "head_bbox": _head_bbox(spec, look),
            }
            _write_json(base / "meta.json", meta)
            samples.append({"sample_id": sid, "domain": domain, "pair_id": i,
                            "num_frames": spec.frames, "identity_id": look.identity_id})

    manifest = {"seed": spec.seed, "num_pairs": spec.num_samples, "samples": samples}
    _write_json(root / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# validation

@dataclass
class Violation:
    sample_id: str
    message: str


@dataclass
class ValidationReport:
    num_samples: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_json_obj(self) -> dict:
        return {
            "num_samples": self.num_samples,
            "ok": self.ok,
            "violations": [{"sample_id": v.sample_id, "message": v.message} for v in self.violations],
        }


def _count_pngs(path: Path) -> int:
    return len(list(path.glob("*.png"))) if path.is_dir() else -1


def validate_dataset(root: str | Path) -> ValidationReport:
    """Check every sample against the layout contract; violations are report
    content, not exceptions."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"dataset root does not exist: {root}")
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        return ValidationReport(0, [Violation("<root>", "missing manifest.json")])
    try:
        manifest = json.loads(manifest_path.read_text())
        entries = manifest["samples"]
    except (json.JSONDecodeError, KeyError) as exc:
        return ValidationReport(0, [Violation("<root>", f"manifest.json malformed: {exc}")])

    violations: list[Violation] = []
    for entry in entries:
        sid = entry.get("sample_id", "<unnamed>")
        bad = lambda msg: violations.append(Violation(sid, msg))  # noqa: E731
        base = root / sid
        if not base.is_dir():
            bad("sample directory missing")
            continue
        try:
            rec = SampleRecord.from_dir(root, sid)
        except DataError as exc:
            bad(str(exc))
            continue
        meta = rec.meta
        missing = [k for k in ("num_frames", "width", "height", "fps", "domain") if k not in meta]
        if missing:
            bad(f"meta.json missing fields {missing}")
            continue
        n, h, w = meta["num_frames"], meta["height"], meta["width"]
        if (cnt := _count_pngs(rec.frames_dir)) != n:
            bad(f"frames/ has {cnt} PNGs, expected {n}")
        if (cnt := _count_pngs(rec.masks_dir)) != n:
            bad(f"masks/ has {cnt} PNGs, expected {n}")
        if meta["domain"] == "mannequin":
            if rec.face_mask_dir is not None:
                bad("mannequin sample must not have face_masks/")
        elif meta["domain"] == "human":
            if rec.face_mask_dir is None:
                bad("human sample missing face_masks/")
            elif (cnt := _count_pngs(rec.face_mask_dir)) != n:
                bad(f"face_masks/ has {cnt} PNGs, expected {n}")
        else:
            bad(f"unknown domain {meta['domain']!r}")
        if not rec.identity_image.exists():
            bad("missing identity.png")
        try:
            pose = read_pose_file(rec.pose_file)
            if pose.joint_names != JOINT_NAMES:
                bad("pose.json joint names do not match the 18-joint skeleton")
            elif pose.num_frames != n:
                bad(f"pose.json has {pose.num_frames} frames, expected {n}")
        except DataError as exc:
            bad(f"pose.json: {exc}")
        try:
            facial = read_pose_file(rec.facial_pose_file)
            if facial.num_frames != 1:
                bad("facial_pose.json must contain exactly one frame")
        except DataError as exc:
            bad(f"facial_pose.json: {exc}")
        for sub in (rec.frames_dir, rec.masks_dir):
            first = sorted(sub.glob("*.png"))[:1] if sub.is_dir() else []
            if first:
                with Image.open(first[0]) as im:
                    if im.size != (w, h):
                        bad(f"{sub.name}/ frames are {im.size}, expected {(w, h)}")
        mask_files = sorted(rec.masks_dir.glob("*.png")) if rec.masks_dir.is_dir() else []
        for mf in mask_files:
            vals = np.unique(np.asarray(Image.open(mf).convert("L")))
            if not np.all(np.isin(vals, (0, 255))):
                bad(f"mask {mf.name} has values outside {{0, 255}}")
                break
    return ValidationReport(len(entries), violations)


# ---------------------------------------------------------------------------
# loading

def list_samples(root: str | Path, domain: str | None = None) -> list[str]:
    manifest_path = Path(root) / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"missing manifest.json under {root}")
    manifest = json.loads(manifest_path.read_text())
    return [
        e["sample_id"] for e in manifest["samples"]
        if domain is None or e["domain"] == domain
    ]


def load_sample(root: str | Path, sample_id: str, frame_indices) -> tuple[np.ndarray, ConditionBundle, np.ndarray | None]:
    """Load (video, conditioning, face_mask) for the given frame indices.

    Mannequin samples return ``None`` for the face mask.
    """
    rec = SampleRecord.from_dir(root, sample_id)
    indices = list(frame_indices)
    n = rec.meta["num_frames"]
    if any(i < 0 or i >= n for i in indices):
        raise DataError(f"sample {sample_id}: frame indices {indices} out of range [0, {n})")

    video = read_video_dir(rec.frames_dir, indices)
    masks = read_mask_dir(rec.masks_dir, indices)
    pose = read_pose_file(rec.pose_file)
    bundle = ConditionBundle(
        clothing_mask=masks,
        identity_image=read_image(rec.identity_image)[None],
        facial_pose=read_pose_file(rec.facial_pose_file),
        body_pose=pose.frames(indices),
        clothing_video=video * masks,
    )
    face = read_mask_dir(rec.face_mask_dir, indices) if rec.face_mask_dir else None
    return video, bundle, face


# ---------------------------------------------------------------------------
# real-data preprocessing

def center_crop_box(height: int, width: int) -> tuple[int, int, int, int]:
    """(left, top, crop_w, crop_h) enforcing a 2:1 height:width aspect.

    Crops along the width when the input is wider than 2:1 (floor-centered);
    falls back to a height crop for inputs narrower than 2:1.
    """
    target_w = height // 2
    if width > target_w:
        return ((width - target_w) // 2, 0, target_w, height)
    if width < target_w:
        target_h = 2 * width
        return (0, (height - target_h) // 2, width, target_h)
    return (0, 0, width, height)


def _crop_resize(im: Image.Image, box: tuple[int, int, int, int], size: tuple[int, int],
                 resample) -> Image.Image:
    left, top, cw, ch = box
    return im.crop((left, top, left + cw, top + ch)).resize(size, resample)


def preprocess_real(video_in: str | Path, out_sample_dir: str | Path,
                    target: tuple[int, int] = (512, 256)) -> SampleRecord:
    """Standardize an externally prepared sample into the dataset layout.

    ``video_in`` must contain frames/ plus the segmentation and pose sidecars
    (masks/, pose.json, identity.png, facial_pose.json, optionally
    face_masks/) produced by external tools; this function does not compute
    them. ``target`` is (height, width).
    """
    src = Path(video_in)
    required = {
        "frames/": src / "frames",
        "masks/": src / "masks",
        "pose.json": src / "pose.json",
        "identity.png": src / "identity.png",
        "facial_pose.json": src / "facial_pose.json",
    }
    missing = [name for name, p in required.items() if not p.exists()]
    if missing:
        raise DataError(
            f"{src}: missing required inputs {missing}; supply segmentation masks and "
            "pose keypoints from your external tools before preprocessing"
        )
    frame_files = sorted((src / "frames").glob("*.png"))
    mask_files = sorted((src / "masks").glob("*.png"))
    if len(frame_files) != len(mask_files) or not frame_files:
        raise DataError(f"{src}: frames/ and masks/ must hold the same nonzero PNG count")

    th, tw = target
    out = Path(out_sample_dir)
    sid = out.name
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    face_src = src / "face_masks"
    has_face = face_src.is_dir()
    if has_face:
        (out / "face_masks").mkdir(exist_ok=True)

    with Image.open(frame_files[0]) as im:
        w0, h0 = im.size
    box = center_crop_box(h0, w0)

    for i, f in enumerate(frame_files):
        with Image.open(f) as im:
            _crop_resize(im.convert("RGB"), box, (tw, th), Image.Resampling.BOX).save(
                out / "frames" / f"{i:05d}.png")
    for i, f in enumerate(mask_files):
        with Image.open(f) as im:
            m = _crop_resize(im.convert("L"), box, (tw, th), Image.Resampling.NEAREST)
            binar = (np.asarray(m) >= 128).astype(np.uint8) * 255
            Image.fromarray(binar).save(out / "masks" / f"{i:05d}.png")
    if has_face:
        for i, f in enumerate(sorted(face_src.glob("*.png"))):
            with Image.open(f) as im:
                m = _crop_resize(im.convert("L"), box, (tw, th), Image.Resampling.NEAREST)
                binar = (np.asarray(m) >= 128).astype(np.uint8) * 255
                Image.fromarray(binar).save(out / "face_masks" / f"{i:05d}.png")

    left, top, cw, ch = box
    sx, sy = tw / cw, th / ch

    def transform(pose: PoseSequence) -> PoseSequence:
        pts = pose.points.copy()
        pts[:, :, 0] = (pts[:, :, 0] - left) * sx
        pts[:, :, 1] = (pts[:, :, 1] - top) * sy
        return PoseSequence(pose.joint_names, pts)

    _write_json(out / "pose.json", transform(read_pose_file(src / "pose.json")).to_json_obj())
    _write_json(out / "facial_pose.json",
                transform(read_pose_file(src / "facial_pose.json")).to_json_obj())
    with Image.open(src / "identity.png") as im:
        _crop_resize(im.convert("RGB"), box, (tw, th), Image.Resampling.BOX).save(out / "identity.png")

    src_meta = {}
    if (src / "meta.json").exists():
        src_meta = json.loads((src / "meta.json").read_text())
    meta = {
        "sample_id": sid,
        "num_frames": len(frame_files),
        "width": tw,
        "height": th,
        "fps": src_meta.get("fps", 30.0),
        "domain": "human" if has_face else "mannequin",
    }
    _write_json(out / "meta.json", meta)

    # keep the root manifest in sync
    root = out.parent
    manifest_path = root / "manifest.json"
    manifest = {"samples": []}
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())
    manifest["samples"] = [e for e in manifest["samples"] if e["sample_id"] != sid]
    manifest["samples"].append({"sample_id": sid, "domain": meta["domain"],
                                "num_frames": meta["num_frames"]})
    manifest["samples"].sort(key=lambda e: e["sample_id"])
    _write_json(manifest_path, manifest)
    return SampleRecord.from_dir(root, sid)
