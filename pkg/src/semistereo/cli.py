"""Command-line surface: toy dataset generation, training, evaluation and
matching-cost diagnostics.

Exit codes: 0 success, 1 expected failure (bad config or data, with a
message), 2 internal error. Every command is deterministic given its flags
and input bytes.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from dataclasses import dataclass, field
from pathlib import Path

from . import autodiff as ad
from .analysis import (
    CURVE_METRICS,
    curve_from_volume,
    curve_stats,
    emit_report,
    feature_cost_volume,
    photometric_cost_volume,
)
from .data import ToySceneSpec, generate_toy_pair, load_toy_dataset, load_toy_sample, save_toy_sample
from .errors import ConfigError, DataError, SemiStereoError
from .evaluate import evaluate_dataset
from .trainer import config_from_text, load_checkpoint, run_training

ENV_HELP = (
    "Environment: STEREO_SEMISUP_DETERMINISTIC=1 forces single-worker deterministic mode; "
    "STEREO_SEMISUP_BACKEND selects the kernel backend (auto|numba|numpy)."
)


@dataclass
class CommandResult:
    exit_code: int = 0
    artifacts_written: list = field(default_factory=list)


def cmd_gen_toy(args) -> CommandResult:
    spec = ToySceneSpec(
        width=args.width,
        height=args.height,
        n_layers=args.layers,
        disparity_range=(args.dmin, args.dmax),
        texture=args.texture,
        texture_scale=args.texture_scale,
    )
    spec.validate()
    out = Path(args.out)
    artifacts = []
    for i in range(args.count):
        seed = args.seed + i
        sample = generate_toy_pair(spec, seed)
        meta = {
            "seed": seed,
            "width": spec.width,
            "height": spec.height,
            "n_layers": spec.n_layers,
            "disparity_range": list(spec.disparity_range),
            "texture": spec.texture,
            "texture_scale": spec.texture_scale,
        }
        save_toy_sample(out, sample, meta=meta)
        artifacts.append(out / sample.id)
    return CommandResult(artifacts_written=artifacts)


def cmd_train(args) -> CommandResult:
    cfg_path = Path(args.config)
    if not cfg_path.exists():
        raise ConfigError(f"config file {cfg_path} does not exist")
    config = config_from_text(cfg_path.read_text())
    synthetic = load_toy_dataset(args.synthetic, domain="synthetic")
    real = load_toy_dataset(args.real, domain="real") if args.real else None
    resume = load_checkpoint(args.resume) if args.resume else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    record, log = run_training(
        config,
        synthetic,
        real,
        log_path=log_path,
        checkpoint_dir=out,
        resume=resume,
    )
    print(f"trained {record.step} steps ({record.epoch} epochs); final checkpoint {out / 'final.bin'}")
    if log:
        print(f"last step: tag={log[-1]['tag']} total={log[-1]['total']:.6g} skipped={log[-1]['skipped']}")
    return CommandResult(artifacts_written=[out / "final.bin", log_path])


def cmd_eval(args) -> CommandResult:
    record = load_checkpoint(args.ckpt)
    params = {k: ad.Tensor(v) for k, v in record.params.items()}
    samples = load_toy_dataset(args.data)
    missing = [s.id for s in samples if s.gt_disparity is None]
    if missing:
        raise DataError(f"samples without ground truth cannot be evaluated: {missing}")
    report = evaluate_dataset(params, samples, record.config.model)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_csv())
    print(f"aggregate EPE over {report.n_samples} samples: {report.aggregate_epe:.4f}")
    if report.excluded:
        print(f"excluded (no valid pixels): {', '.join(report.excluded)}")
    return CommandResult(artifacts_written=[out])


def _parse_pixels(text: str):
    pixels = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 2:
            raise ConfigError(f"--pixels expects 'x,y;x,y', got {text!r}")
        try:
            pixels.append((int(parts[0]), int(parts[1])))
        except ValueError as e:
            raise ConfigError(f"--pixels: {e}") from e
    if not pixels:
        raise ConfigError("--pixels named no pixels")
    return pixels


def cmd_analyze(args) -> CommandResult:
    record = load_checkpoint(args.ckpt)
    params = {k: ad.Tensor(v) for k, v in record.params.items()}
    model_cfg = record.config.model
    sample = load_toy_sample(args.sample)
    h, w = sample.shape
    if args.max_disp >= w:
        raise ConfigError(f"--max-disp {args.max_disp} must be < image width {w}")
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        if m not in CURVE_METRICS:
            raise ConfigError(f"unknown metric {m!r}; choose from {CURVE_METRICS}")
    pixels = _parse_pixels(args.pixels)
    for x, y in pixels:
        if not (0 <= x < w and 0 <= y < h):
            raise ConfigError(f"pixel ({x},{y}) outside the {h}x{w} image")

    volumes = {}
    for metric in metrics:
        if metric == "photometric":
            volumes[metric] = (1, *photometric_cost_volume(sample, args.max_disp, args.patch_radius))
        else:
            volumes[metric] = (
                args.level,
                *feature_cost_volume(sample, params, model_cfg, metric, args.level, args.max_disp),
            )
    curves, stats = [], []
    for x, y in pixels:
        gt = None if sample.gt_disparity is None else float(sample.gt_disparity[y, x])
        for metric in metrics:
            level, vol, oob = volumes[metric]
            curve = curve_from_volume(vol, oob, sample.id, (x, y), metric, level, gt)
            curves.append(curve)
            stats.append(curve_stats(curve, args.temperature))
    written = emit_report(curves, stats, args.out)
    print(f"wrote {len(written)} files under {args.out}")
    return CommandResult(artifacts_written=written)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semistereo",
        description="Semi-supervised stereo disparity estimation, desk scale.",
        epilog=ENV_HELP,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate a toy stereo dataset with exact ground truth")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--height", type=int, default=64)
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--dmin", type=int, default=1)
    g.add_argument("--dmax", type=int, default=6)
    g.add_argument("--texture", default="noise", choices=("noise", "gradient", "checker"))
    g.add_argument("--texture-scale", type=int, default=4)
    g.set_defaults(func=cmd_gen_toy)

    t = sub.add_parser("train", help="run (semi-)supervised training from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--synthetic", required=True, help="labeled synthetic pool directory")
    t.add_argument("--real", default=None, help="unlabeled real pool directory (omit for supervised-only)")
    t.add_argument("--out", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="end-point-error evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True, help="CSV output path")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="matching-cost curves and statistics for chosen pixels")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--sample", required=True, help="sample directory (left.png, right.png, ...)")
    a.add_argument("--pixels", required=True, help="semicolon-separated x,y pairs, e.g. '10,12;40,9'")
    a.add_argument("--metrics", default="photometric,cosine")
    a.add_argument("--max-disp", type=int, required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--patch-radius", type=int, default=1)
    a.add_argument("--level", type=int, default=2, choices=(2, 4, 8))
    a.add_argument("--temperature", type=float, default=0.1)
    a.set_defaults(func=cmd_analyze)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
        return result.exit_code
    except SemiStereoError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        print("internal error:", file=sys.stderr)
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
