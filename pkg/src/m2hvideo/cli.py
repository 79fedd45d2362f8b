"""Command-line entry point: data generation, validation, training,
inference, and evaluation, driven by a key-tree config file.

Exit codes: 0 success, 2 configuration errors, 3 data errors, 4 runtime
numeric errors. Set M2H_NUM_THREADS to cap worker parallelism.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
from pathlib import Path

from .errors import ConfigError, DataError, MetricError, NumericError, RangeError, ShapeError

EXIT_OK = 0
EXIT_VIOLATIONS = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """Guard an output directory against concurrent writers."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".m2hvideo.lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"output directory {out_dir} is locked by another command "
            f"(remove {lock} if that command is gone)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _load_config(path: str | None):
    from .config import RunConfig, load_run_config

    return load_run_config(path) if path else RunConfig().validate()


def cmd_make_data(args) -> int:
    from .data import generate_synthetic

    cfg = _load_config(args.spec)
    out = Path(args.out)
    with output_lock(out):
        manifest = generate_synthetic(cfg.data, out)
    print(f"wrote {len(manifest['samples'])} samples under {out}")
    (out / "make_data_summary.json").write_text(
        json.dumps({"out": str(out), "num_samples": len(manifest["samples"]),
                    "seed": cfg.data.seed}, sort_keys=True, indent=1) + "\n")
    return EXIT_OK


def cmd_validate(args) -> int:
    from .data import validate_dataset

    report = validate_dataset(args.root)
    payload = report.to_json_obj()
    if args.report:
        Path(args.report).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    print(json.dumps(payload, sort_keys=True, indent=1))
    if report.ok:
        print(f"OK: {report.num_samples} samples clean", file=sys.stderr)
        return EXIT_OK
    for v in report.violations:
        print(f"VIOLATION {v.sample_id}: {v.message}", file=sys.stderr)
    return EXIT_VIOLATIONS


def cmd_train(args) -> int:
    from .training import run_training

    cfg = _load_config(args.config)
    out = Path(args.out)
    with output_lock(out):
        final = run_training(args.data, cfg.train, cfg.model, out, resume=args.resume)
        summary = {
            "final_checkpoint": str(final),
            "loss_log": str(out / "loss_log.csv"),
            "n_iter": cfg.train.n_iter,
            "seed": cfg.train.seed,
        }
        (out / "train_summary.json").write_text(
            json.dumps(summary, sort_keys=True, indent=1) + "\n")
    print(f"training complete; final checkpoint: {final}")
    return EXIT_OK


def _resolve_sample(sample: str, data_root: str | None) -> Path:
    as_path = Path(sample)
    if as_path.is_dir():
        return as_path
    if data_root:
        candidate = Path(data_root) / sample
        if candidate.is_dir():
            return candidate
    raise DataError(
        f"sample {sample!r} is neither a directory nor an id under --data")


def cmd_generate(args) -> int:
    from .config import InferDefaults
    from .inference import InferenceRequest, generate, save_generation

    cfg = _load_config(args.config)
    defaults: InferDefaults = cfg.infer
    req = InferenceRequest(
        mannequin_sample_ref=str(_resolve_sample(args.sample, args.data)),
        identity_image_ref=args.identity,
        steps=args.steps if args.steps is not None else defaults.steps,
        guidance_scale=args.cfg if args.cfg is not None else defaults.guidance_scale,
        seed=args.seed if args.seed is not None else defaults.seed,
        denoised_clamp=defaults.denoised_clamp,
    )
    out = Path(args.out)
    with output_lock(out):
        video = generate(req, args.ckpt, expected_config=cfg.model if args.config else None)
        save_generation(video, out, req, args.ckpt, save_container=args.save_container)
    print(f"generated {video.shape[0]} frames into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .report import evaluate_directories, write_report

    cfg = _load_config(args.config)
    report = evaluate_directories(args.generated, args.reference, args.masks,
                                  mask_scope=cfg.eval.mask_scope)
    paths = write_report(report, args.report, method=cfg.eval.method)
    agg = report.aggregate()
    fvd_s = "n/a" if agg["fvd"] is None else f"{agg['fvd']:.4f}"
    print(f"samples: {len(report.per_sample)}  PSNR {agg['psnr_db']:.2f} dB  "
          f"SSIM {agg['ssim']:.4f}  perceptual {agg['perceptual']:.5f}  "
          f"CSIM {agg['csim']:.4f}  FVD {fvd_s}")
    print(f"report: {paths['json']}  csv: {paths['csv']}  figure: {paths['figure']}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="m2hvideo",
        description="Mannequin-to-human video generation: data, training, "
                    "inference, and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="generate the synthetic paired dataset")
    p.add_argument("--spec", help="config file; its data section parametrizes generation")
    p.add_argument("--out", required=True, help="output dataset root")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("validate", help="check a dataset tree against the layout contract")
    p.add_argument("--root", required=True, help="dataset root to validate")
    p.add_argument("--report", help="also write the JSON report to this path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", help="config file (train/model sections)")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--out", required=True, help="output directory for checkpoints and logs")
    p.add_argument("--resume", help="training checkpoint to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="synthesize a human video from a mannequin sample")
    p.add_argument("--config", help="config file (model/infer sections)")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--sample", required=True,
                   help="mannequin sample directory, or an id under --data")
    p.add_argument("--data", help="dataset root used to resolve --sample ids")
    p.add_argument("--identity", required=True,
                   help="identity image (facial_pose.json sidecar required)")
    p.add_argument("--steps", type=int, default=None, help="sampler steps (default 50)")
    p.add_argument("--cfg", type=float, default=None, help="guidance scale (default 7.5)")
    p.add_argument("--seed", type=int, default=None, help="sampling seed (default 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--save-container", action="store_true",
                   help="also write the lossless video.npz container")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated videos against references")
    p.add_argument("--config", help="config file (eval section)")
    p.add_argument("--generated", required=True, help="root of generated videos")
    p.add_argument("--reference", required=True, help="root of reference videos")
    p.add_argument("--masks", required=True, help="root of clothing masks")
    p.add_argument("--report", required=True, help="JSON report path (CSV/figure written next to it)")
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv: list[str] | None = None) -> int:
    threads = os.environ.get("M2H_NUM_THREADS")
    if threads:
        try:
            import torch

            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ignoring invalid M2H_NUM_THREADS={threads!r}", file=sys.stderr)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, RangeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MetricError, ShapeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
