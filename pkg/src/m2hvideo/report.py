"""Evaluation over directory trees and report rendering: JSON + CSV summary
plus matplotlib figures written next to them.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib
import numpy as np
import torch

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .data import read_mask_dir, read_video_dir  # noqa: E402
from .encoders import ClothingEmbedder, FaceEmbedder, PerceptualExtractor  # noqa: E402
from .errors import DataError  # noqa: E402
from .metrics import (  # noqa: E402
    EvalReport,
    SampleMetrics,
    clothing_video_embedder,
    csim,
    fvd,
    masked_psnr,
    masked_ssim,
    perceptual_distance,
)

MASK_SCOPES = ("clothing_region", "full_frame")


def _video_subdir(base: Path) -> Path | None:
    """A directory counts as a video if it holds PNGs directly or under
    frames/ (generation output) or masks/ (dataset sample)."""
    for candidate in (base, base / "frames"):
        if candidate.is_dir() and any(candidate.glob("*.png")):
            return candidate
    return None


def _mask_subdir(base: Path) -> Path | None:
    for candidate in (base, base / "masks"):
        if candidate.is_dir() and any(candidate.glob("*.png")):
            return candidate
    return None


def discover_videos(root: Path, mask_mode: bool = False) -> dict[str, Path]:
    """Map sample name -> frame directory under ``root``. A root that itself
    holds PNGs maps to the single name '.'."""
    probe = _mask_subdir(root) if mask_mode else _video_subdir(root)
    if probe is not None and probe == root:
        return {".": root}
    found = {}
    for child in sorted(p for p in root.iterdir() if p.is_dir()):
        sub = _mask_subdir(child) if mask_mode else _video_subdir(child)
        if sub is not None:
            found[child.name] = sub
    if not found:
        raise DataError(f"no PNG videos found under {root}")
    return found


def evaluate_directories(generated_root: str | Path, reference_root: str | Path,
                         masks_root: str | Path, mask_scope: str = "clothing_region",
                         face_seed: int = 200, clothing_seed: int = 300,
                         perceptual_seed: int = 400) -> EvalReport:
    """Per-sample masked PSNR/SSIM/perceptual + face cosine similarity, plus
    a distribution distance between the generated and reference sets when at
    least two samples match."""
    if mask_scope not in MASK_SCOPES:
        raise DataError(f"mask_scope must be one of {MASK_SCOPES}")
    gen = discover_videos(Path(generated_root))
    ref = discover_videos(Path(reference_root))
    masks = discover_videos(Path(masks_root), mask_mode=True)
    names = sorted(set(gen) & set(ref))
    if not names:
        raise DataError("no matching sample names between generated and reference roots")

    face = FaceEmbedder(seed=face_seed)
    clothing = ClothingEmbedder(seed=clothing_seed)
    perceptual = PerceptualExtractor(seed=perceptual_seed)
    embedder = clothing_video_embedder(clothing)

    report = EvalReport(mask_scope=mask_scope, embedder_ref=clothing.weights_ref)
    gen_videos, ref_videos = [], []
    for name in names:
        v_gen = read_video_dir(gen[name])
        v_ref = read_video_dir(ref[name])
        if v_gen.shape != v_ref.shape:
            raise DataError(
                f"sample {name}: generated {v_gen.shape} vs reference {v_ref.shape}")
        if mask_scope == "clothing_region":
            if name not in masks:
                raise DataError(f"sample {name}: no mask directory found")
            mask = read_mask_dir(masks[name])
            if mask.shape[0] != v_gen.shape[0]:
                raise DataError(f"sample {name}: mask frame count mismatch")
        else:
            mask = np.ones((v_gen.shape[0], 1, v_gen.shape[2], v_gen.shape[3]),
                           dtype=np.float32)
        sims = []
        with torch.no_grad():
            for i in range(v_gen.shape[0]):
                e_gen = face(torch.from_numpy(v_gen[i]))
                e_ref = face(torch.from_numpy(v_ref[i]))
                sims.append(csim(e_gen.numpy(), e_ref.numpy()))
        report.per_sample.append(SampleMetrics(
            sample_id=name,
            psnr_db=masked_psnr(v_gen, v_ref, mask),
            ssim=masked_ssim(v_gen, v_ref, mask),
            perceptual=perceptual_distance(v_gen, v_ref, mask, perceptual),
            csim=float(np.mean(sims)),
        ))
        gen_videos.append(v_gen)
        ref_videos.append(v_ref)

    if len(gen_videos) >= 2:
        report.fvd = fvd(gen_videos, ref_videos, embedder)
    return report


def write_report(report: EvalReport, report_path: str | Path,
                 method: str = "m2hvideo") -> dict[str, Path]:
    """Write the JSON report plus the CSV summary row and a figure next to it."""
    path = Path(report_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report.to_json_obj(), sort_keys=True, indent=1) + "\n")
    csv_path = path.with_suffix(".csv")
    header, row = report.csv_row(method)
    csv_path.write_text(header + "\n" + row + "\n")
    fig_path = path.with_suffix(".png")
    save_metrics_figure(report, fig_path)
    return {"json": path, "csv": csv_path, "figure": fig_path}


def save_metrics_figure(report: EvalReport, out_path: str | Path) -> Path:
    """Render per-sample metric bars with the aggregate in each panel title."""
    samples = report.per_sample
    names = [s.sample_id for s in samples]
    agg = report.aggregate()
    fields = [("psnr_db", "masked PSNR (dB)"), ("ssim", "masked SSIM"),
              ("perceptual", "perceptual distance"), ("csim", "face cosine similarity")]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    for ax, (key, label) in zip(axes.ravel(), fields):
        values = [getattr(s, key) for s in samples]
        ax.bar(range(len(values)), values, color="#4878a8")
        ax.set_xticks(range(len(values)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=7)
        ax.set_title(f"{label} (mean {agg[key]:.4g})", fontsize=9)
        ax.grid(axis="y", alpha=0.3)
    suffix = f"FVD {report.fvd:.4g} | " if report.fvd is not None else ""
    fig.suptitle(f"{suffix}mask scope: {report.mask_scope} | embedder: {report.embedder_ref}",
                 fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)


def save_loss_curve(loss_csv: str | Path, out_path: str | Path) -> Path:
    """Plot the training loss columns over iterations, marking the
    resolution switch."""
    iters, totals, diffs, mirs, resolutions = [], [], [], [], []
    with open(loss_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            iters.append(int(row["iter"]))
            totals.append(float(row["loss_total"]))
            diffs.append(float(row["loss_diff"]))
            mirs.append(float(row["loss_mir"]))
            resolutions.append(row["resolution"])
    if not iters:
        raise DataError(f"loss log {loss_csv} is empty")
    fig, ax = plt.subplots(figsize=(8, 4.5))
    ax.plot(iters, totals, label="total", lw=1.2)
    ax.plot(iters, diffs, label="diffusion", lw=0.9, alpha=0.8)
    ax.plot(iters, mirs, label="mirror", lw=0.9, alpha=0.8)
    for i in range(1, len(resolutions)):
        if resolutions[i] != resolutions[i - 1]:
            ax.axvline(iters[i], color="gray", ls="--", lw=0.8)
            ax.text(iters[i], ax.get_ylim()[1], f" {resolutions[i]}", fontsize=7,
                    va="top", color="gray")
            break
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(fontsize=8)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)
