"""Acceptance suite: one test per criterion, each printing a pass/fail line
(run with ``pytest tests/test_acceptance.py -v -s`` to see them).

The overfit-sanity criterion trains the toy configuration end to end through
the CLI and is the long pole (about ten minutes on one CPU core).
"""
import csv
import functools
import json
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from m2hvideo.backbone import BackboneConfig
from m2hvideo.cli import main as cli_main
from m2hvideo.conditioning import AdapterConfig, HeadEncoder, align_distribution
from m2hvideo.data import (
    FACE_JOINT_NAMES,
    JOINT_NAMES,
    PoseSequence,
    SynthSpec,
    generate_synthetic,
    load_sample,
    read_mask_dir,
    read_pose_file,
    read_video_dir,
    validate_dataset,
)
from m2hvideo.diffusion import (
    cfg_combine,
    cosine_schedule,
    ddim_step,
    one_step_denoise,
    q_sample,
    uniform_timesteps,
)
from m2hvideo.encoders import MiniVAE, PerceptualExtractor
from m2hvideo.losses import LossWeights, mirror_loss
from m2hvideo.metrics import csim, frechet_distance, fvd, masked_psnr, masked_ssim
from m2hvideo.model import M2HModel, ModelConfig
from m2hvideo.training import TrainConfig, TrainLoop, sample_frames

from test_training import MICRO_MODEL, MICRO_SPEC


def criterion(num: int, name: str):
    def decorate(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            start = time.time()
            try:
                fn(*args, **kwargs)
            except BaseException:
                print(f"\n[ACCEPTANCE] criterion {num} ({name}): FAIL "
                      f"({time.time() - start:.1f}s)")
                raise
            print(f"\n[ACCEPTANCE] criterion {num} ({name}): PASS "
                  f"({time.time() - start:.1f}s)")
        return wrapper
    return decorate


def randn(*shape, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=dtype)


@criterion(1, "diffusion algebra")
def test_criterion_1_diffusion_algebra():
    for T in (10, 50, 1000):
        sched = cosine_schedule(T)
        ab, sg = sched.alpha_bar, sched.sigma
        assert ab[0] >= 0.999 and np.all(np.diff(ab) < 0)
        assert sg[0] <= 0.04 and np.all(np.diff(sg) > 0)
        assert np.max(np.abs(sg**2 * ab - (1 - ab))) <= 1e-9

    sched = cosine_schedule(1000)
    z0, eps = randn(2, 4, 8, 4, seed=1), randn(2, 4, 8, 4, seed=2)
    for t in (1, 333, 1000):
        rec = one_step_denoise(q_sample(z0, t, eps, sched), eps, t, sched, mode="exact")
        assert torch.max(torch.abs(rec - z0)) <= 1e-5

    ts = uniform_timesteps(1000, 50)
    z = q_sample(z0, ts[0], eps, sched)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        z = ddim_step(z, eps, t, t_prev, sched)
    assert torch.max(torch.abs(z - z0)) <= 1e-3

    a, b = randn(2, 4, 8, 4, seed=3), randn(2, 4, 8, 4, seed=4)
    assert torch.max(torch.abs(cfg_combine(a, b, 0.0) - a)) <= 1e-6
    assert torch.max(torch.abs(cfg_combine(a, b, 1.0) - b)) <= 1e-6


@criterion(2, "statistics alignment moments")
def test_criterion_2_alignment_moments():
    src = randn(1, 4, 4096, seed=5)
    tgt = 2.0 + 3.0 * randn(1, 4, 4096, seed=6)
    out = align_distribution(src, tgt)
    assert torch.max(torch.abs(out.mean(dim=2) - tgt.mean(dim=2))) <= 1e-4
    assert torch.max(torch.abs(out.std(dim=2, unbiased=False)
                               - tgt.std(dim=2, unbiased=False))) <= 1e-4

    src_u, tgt_u = randn(2, 4, 1024, seed=17), randn(2, 4, 1024, seed=18)
    once = align_distribution(src_u, tgt_u)
    assert torch.max(torch.abs(align_distribution(once, tgt_u) - once)) <= 1e-5

    wide = 10.0 * randn(2, 4, 256, seed=7)
    tgt2 = randn(2, 4, 256, seed=8)
    assert torch.max(torch.abs(align_distribution(2.5 * wide - 1.3, tgt2)
                               - align_distribution(wide, tgt2))) <= 1e-5

    const = torch.full((1, 3, 64), 4.0, dtype=torch.float64)
    tgt3 = randn(1, 3, 64, seed=9)
    out3 = align_distribution(const, tgt3)
    assert torch.equal(out3, tgt3.mean(dim=2, keepdim=True).expand_as(out3))


@criterion(3, "head encoder structure")
def test_criterion_3_head_encoder_structure():
    torch.manual_seed(30)
    enc = HeadEncoder(latent_channels=4, face_dim=32, pose_channels=8, dim=64).double()
    kw = dict(
        identity_latent=randn(1, 4, 8, 4, seed=10),
        facial_pose_emb=randn(1, 4, 8, 4, seed=11),
        face_emb=randn(32, seed=12),
        frame_count=8,
    )
    out = enc(body_pose_emb=randn(8, 8, 8, 4, seed=13), **kw)
    assert out.shape == (8, 32, 64)

    constant = randn(1, 8, 8, 4, seed=14).expand(8, -1, -1, -1)
    out_c = enc(body_pose_emb=constant, **kw)
    assert torch.max(torch.abs(out_c - out_c[:1])) <= 1e-6

    with torch.no_grad():
        for name, sub in enc.named_modules():
            if name.endswith("to_out"):
                sub.weight.zero_()
                sub.bias.zero_()
    ablated = enc(body_pose_emb=torch.zeros(8, 8, 8, 4, dtype=torch.float64), **kw)
    with torch.no_grad():
        x = enc.build_queries(kw["identity_latent"], kw["facial_pose_emb"],
                              kw["face_emb"]).expand(8, -1, -1)
        for block in enc.blocks:
            x = x + block.ff(block.norm2(x))
    assert torch.max(torch.abs(ablated - x)) <= 1e-9


@criterion(4, "mirror loss")
def test_criterion_4_mirror_loss():
    perceptual = PerceptualExtractor(seed=400).double()
    g = torch.Generator().manual_seed(40)
    v = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    mask = torch.zeros(2, 1, 16, 16, dtype=torch.float64)
    mask[:, :, 4:12, 4:12] = 1.0
    weights = LossWeights(alpha=0.7, beta=0.3)

    assert mirror_loss(v, v, mask, weights, perceptual).item() == 0.0

    v_g = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64)
    base = mirror_loss(v, v_g, mask, weights, perceptual)
    v_g2 = v_g.clone()
    v_g2[:, :, :4, :] = 0.0
    assert abs(mirror_loss(v, v_g2, mask, weights, perceptual).item() - base.item()) <= 1e-6
    pix_only = LossWeights(alpha=1.0, beta=0.0)
    assert mirror_loss(v, v_g2, mask, pix_only, perceptual).item() == \
        mirror_loss(v, v_g, mask, pix_only, perceptual).item()

    def loss(a, b):
        return mirror_loss(v, v_g, mask, LossWeights(alpha=a, beta=b), perceptual).item()

    zero_a, zero_b = loss(0.0, 0.3), loss(0.1, 0.0)
    assert loss(0.2, 0.3) - zero_a == pytest.approx(2 * (loss(0.1, 0.3) - zero_a), abs=1e-6)
    assert loss(0.1, 0.6) - zero_b == pytest.approx(2 * (loss(0.1, 0.3) - zero_b), abs=1e-6)

    # gradient through the full chain: one-step denoise -> decode -> loss
    torch.manual_seed(41)
    vae = MiniVAE(latent_channels=4, base_width=16, seed=100).double()
    sched = cosine_schedule(1000)
    t = 350
    z0 = randn(1, 4, 1, 1, seed=15)
    eps_true = randn(1, 4, 1, 1, seed=16)
    z_t = q_sample(z0, t, eps_true, sched)
    v_h = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    m8 = torch.rand(1, 1, 8, 8, generator=g, dtype=torch.float64)

    def chain(eps_pred):
        z_est = one_step_denoise(z_t, eps_pred, t, sched, mode="exact")
        return mirror_loss(v_h, vae.decode(z_est), m8, weights, perceptual)

    eps_pred = eps_true.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(chain(eps_pred), eps_pred)
    h = 1e-6
    rng = np.random.default_rng(4)
    with torch.no_grad():
        for _ in range(4):
            i = tuple(rng.integers(d) for d in eps_pred.shape)
            ep, em = eps_pred.detach().clone(), eps_pred.detach().clone()
            ep[i] += h
            em[i] -= h
            fd = (chain(ep) - chain(em)) / (2 * h)
            assert abs(grad[i].item() - fd.item()) <= 1e-3 * max(1e-6, abs(fd.item()))


@criterion(5, "training algorithm fidelity")
def test_criterion_5_training_fidelity(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept5_ds")
    generate_synthetic(MICRO_SPEC, root)

    def fresh_loop(n_iter=10):
        cfg = TrainConfig(n_iter=n_iter, batch_size=1, seed=50)
        model = M2HModel(MICRO_MODEL)
        return TrainLoop(model, cfg, root, ["human_0000"])

    runs = []
    for _ in range(2):
        loop = fresh_loop()
        runs.append([loop.step().loss_total for _ in range(10)])
    assert np.max(np.abs(np.array(runs[0]) - np.array(runs[1]))) <= 1e-7

    loop = fresh_loop(n_iter=6)
    before = loop.model.frozen_state_arrays()
    resolutions = [loop.step().resolution for _ in range(6)]
    after = loop.model.frozen_state_arrays()
    for key in before:
        assert np.array_equal(before[key], after[key])
    assert resolutions == ["16x8"] * 3 + ["32x16"] * 3  # switch at floor(6/2)+1
    assert sum(1 for a, b in zip(resolutions, resolutions[1:]) if a != b) == 1

    cfg = TrainConfig(n_iter=2)
    assert sample_frames(29, cfg, np.random.default_rng(0)) == list(range(0, 29, 4))
    draws = np.random.default_rng(1)
    for _ in range(1000):
        length = int(draws.integers(29, 120))
        assert all(i < length for i in sample_frames(length, cfg, draws))
    with pytest.raises(Exception):
        sample_frames(28, cfg, np.random.default_rng(0))


OVERFIT_CFG = """
data.seed = 5
data.num_samples = 1
data.frames = 32

train.n_iter = 500
train.batch_size = 4
train.seed = 0
train.learning_rate = 3e-4
train.vae_pretrain_steps = 700
train.checkpoint_every = 500
"""


@pytest.fixture(scope="module")
def overfit_run(tmp_path_factory):
    """Train the toy configuration on one synthetic video through the CLI."""
    base = tmp_path_factory.mktemp("overfit")
    cfg_path = base / "run.cfg"
    cfg_path.write_text(OVERFIT_CFG)
    dataset = base / "dataset"
    assert cli_main(["make-data", "--spec", str(cfg_path), "--out", str(dataset)]) == 0
    run_dir = base / "run"
    assert cli_main(["train", "--config", str(cfg_path), "--data", str(dataset),
                     "--out", str(run_dir)]) == 0
    return base, cfg_path, dataset, run_dir


@criterion(6, "overfit sanity")
def test_criterion_6_overfit_sanity(overfit_run, tmp_path):
    base, cfg_path, dataset, run_dir = overfit_run

    with open(run_dir / "loss_log.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 500
    totals = [float(r["loss_total"]) for r in rows]
    first, last = np.mean(totals[:50]), np.mean(totals[-50:])
    assert last <= 0.5 * first, f"convergence too weak: first50={first:.4f} last50={last:.4f}"

    gen_dir = tmp_path / "generated"
    code = cli_main(["generate", "--ckpt", str(run_dir / "ckpt_final.npz"),
                     "--sample", "human_0000", "--data", str(dataset),
                     "--identity", str(dataset / "human_0000" / "identity.png"),
                     "--seed", "1", "--out", str(gen_dir)])
    assert code == 0
    ground_truth = read_video_dir(dataset / "human_0000" / "frames")
    masks = read_mask_dir(dataset / "human_0000" / "masks")
    generated = read_video_dir(gen_dir / "frames")
    gray = np.full_like(ground_truth, 0.5)
    gray_psnr = masked_psnr(gray, ground_truth, masks)
    gen_psnr = masked_psnr(generated, ground_truth, masks)
    print(f"\n    masked PSNR: generated {gen_psnr:.2f} dB vs gray baseline "
          f"{gray_psnr:.2f} dB (margin {gen_psnr - gray_psnr:+.2f})")
    assert gen_psnr >= gray_psnr + 10.0


class TestOverfitCheckpointProperties:
    """Trained-checkpoint checks that share the expensive overfit fixture."""

    def test_guidance_branches_diverge_after_training(self, overfit_run):
        from m2hvideo.checkpoint import load_checkpoint
        from m2hvideo.data import read_image
        from m2hvideo.model import model_from_checkpoint

        base, _, dataset, run_dir = overfit_run
        arrays, meta = load_checkpoint(run_dir / "ckpt_final.npz")
        model = model_from_checkpoint(arrays, meta)
        video = read_video_dir(dataset / "human_0000" / "frames")
        masks = read_mask_dir(dataset / "human_0000" / "masks")
        pose = read_pose_file(dataset / "human_0000" / "pose.json")
        identity = torch.from_numpy(read_image(dataset / "human_0000" / "identity.png")[None])
        facial = read_pose_file(dataset / "human_0000" / "facial_pose.json")
        idx = list(range(8))
        with torch.no_grad():
            prep = model.prepare_conditioning(
                torch.from_numpy(video[idx] * masks[idx]), identity, facial,
                pose.frames(idx))
            z = torch.randn(8, 4, 8, 4, generator=torch.Generator().manual_seed(0))
            cond = model.predict_noise(z, 500, prep, drop_cond=False)
            uncond = model.predict_noise(z, 500, prep, drop_cond=True)
        gap = torch.linalg.vector_norm(cond - uncond).item()
        assert gap > 0.0

    def test_identity_swap_changes_head_more_than_clothing(self, overfit_run, tmp_path):
        from m2hvideo.inference import InferenceRequest, generate

        base, _, dataset, run_dir = overfit_run
        other = tmp_path / "other_identities"
        generate_synthetic(SynthSpec(seed=123, num_samples=1, frames=29), other)

        videos = {}
        for name, identity in (("own", dataset / "human_0000" / "identity.png"),
                               ("swap", other / "human_0000" / "identity.png")):
            req = InferenceRequest(
                mannequin_sample_ref=str(dataset / "human_0000"),
                identity_image_ref=str(identity), steps=50, guidance_scale=7.5, seed=1)
            videos[name] = generate(req, run_dir / "ckpt_final.npz")
        masks = read_mask_dir(dataset / "human_0000" / "masks")
        face = read_mask_dir(dataset / "human_0000" / "face_masks")
        delta = np.abs(videos["own"] - videos["swap"])
        inside_clothing = float((delta * masks).sum() / (3 * masks.sum()))
        inside_head = float((delta * face).sum() / (3 * face.sum()))
        assert inside_head > 0.0
        ratio = inside_clothing / inside_head
        print(f"\n    identity-swap change ratio (clothing/head): {ratio:.3f}")
        assert ratio < 1.0


@criterion(7, "metrics")
def test_criterion_7_metrics():
    rng = np.random.default_rng(70)
    v = rng.random((2, 3, 24, 16)).astype(np.float32)
    ones = np.ones((2, 1, 24, 16), dtype=np.float32)
    assert masked_psnr(v, v, ones) == 99.0
    a0 = np.zeros((1, 3, 8, 8), dtype=np.float32)
    assert masked_psnr(a0, np.full_like(a0, 0.1), ones[:1, :, :8, :8]) == pytest.approx(20.0, abs=1e-5)

    assert masked_ssim(v, v, ones) == pytest.approx(1.0, abs=1e-9)
    ca = np.full((1, 3, 32, 32), 0.2)
    cb = np.full((1, 3, 32, 32), 0.8)
    closed_form = (2 * 0.2 * 0.8 + 0.01**2) / ((0.04 + 0.64) + 0.01**2)
    assert masked_ssim(ca, cb, np.ones((1, 1, 32, 32))) == pytest.approx(closed_form, abs=1e-9)

    for dim in (1, 4, 16):
        mu1, mu2 = rng.normal(size=dim), rng.normal(size=dim)
        d1, d2 = rng.uniform(0.2, 2.0, dim), rng.uniform(0.2, 2.0, dim)
        expected = np.sum((mu1 - mu2) ** 2) + np.sum((np.sqrt(d1) - np.sqrt(d2)) ** 2)
        assert frechet_distance(mu1, np.diag(d1), mu2, np.diag(d2)) == pytest.approx(
            expected, abs=1e-6)

    from m2hvideo.encoders import ClothingEmbedder
    from m2hvideo.metrics import clothing_video_embedder

    embedder = clothing_video_embedder(ClothingEmbedder(seed=300))
    videos = [rng.random((4, 3, 16, 16)).astype(np.float32) for _ in range(3)]
    assert fvd(videos, list(videos), embedder) <= 1e-4

    e = np.array([0.3, -1.2, 0.5])
    assert csim(e, e) == pytest.approx(1.0)
    assert csim([1.0, 0.0], [0.0, 2.0]) == pytest.approx(0.0)
    assert csim(e, -e) == pytest.approx(-1.0)


@criterion(8, "temporal zero-init identity")
def test_criterion_8_temporal_zero_init():
    from m2hvideo.backbone import DenoisingUNet

    torch.manual_seed(80)
    model = M2HModel(MICRO_MODEL).eval()
    n, h, w = 4, 32, 16
    g = torch.Generator().manual_seed(81)
    clothing = torch.rand(1, 3, h, w, generator=g).expand(n, -1, -1, -1)
    identity = torch.rand(1, 3, h, w, generator=g)
    pts = np.zeros((n, 18, 3))
    pts[:, :, 0] = 8.0
    pts[:, :, 1] = np.linspace(4, 28, 18)[None, :]
    pts[:, :, 2] = 1.0
    body = PoseSequence(JOINT_NAMES, pts)
    facial = PoseSequence(FACE_JOINT_NAMES, pts[:1, :5].copy())
    prep = model.prepare_conditioning(clothing, identity, facial, body)
    z = torch.randn(1, 4, 4, 2, generator=g).expand(n, -1, -1, -1)
    with torch.no_grad():
        out = model.predict_noise(z, 123, prep)
    assert torch.max(torch.abs(out - out[:1])) <= 1e-6

    cfg = BackboneConfig(base_width=16, channel_multipliers=(1, 2), attention_levels=(1,),
                         id_token_dim=16, clip_token_dim=16, null_token_count=4)
    unet = DenoisingUNet(cfg).eval()
    x = torch.randn(5, cfg.in_channels, 8, 4, generator=g)
    f_pi = torch.randn(5, 6, 16, generator=g)
    f_clip = torch.randn(5, 5, 16, generator=g)
    perm = torch.randperm(5, generator=torch.Generator().manual_seed(82))
    with torch.no_grad():
        base = unet(x, 55, f_pi, f_clip)
        permuted = unet(x[perm], 55, f_pi[perm], f_clip[perm])
    assert torch.max(torch.abs(permuted - base[perm])) <= 1e-6


@criterion(9, "data round-trip")
def test_criterion_9_data_round_trip(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept9_ds")
    spec = SynthSpec(seed=90, num_samples=1, frames=29)
    generate_synthetic(spec, root)
    assert validate_dataset(root).ok

    from m2hvideo.data import _pair_look, _render_pair_frame

    rng = np.random.default_rng(spec.seed)
    look = _pair_look(rng, spec)
    for t in (0, 7, 28):
        _, mask, fmask, joints = _render_pair_frame(spec, look, t, mannequin=False)
        _, bundle, face = load_sample(root, "human_0000", [t])
        assert np.array_equal(bundle.body_pose.points[0], joints)
        assert np.array_equal(bundle.clothing_mask[0, 0], mask)
        assert np.array_equal(face[0, 0], fmask)

    human = read_video_dir(root / "human_0000" / "frames")
    mann = read_video_dir(root / "mannequin_0000" / "frames")
    meta = json.loads((root / "human_0000" / "meta.json").read_text())
    x0, y0, x1, y1 = meta["head_bbox"]
    diff = np.abs(human - mann)
    outside = diff.copy()
    outside[:, :, y0:y1, x0:x1] = 0.0
    assert outside.max() == 0.0
