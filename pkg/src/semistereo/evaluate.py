"""End-point-error evaluation.

EPE is the mean absolute disparity error over valid pixels at full input
resolution, with no large-disparity filtering anywhere. The dataset aggregate
is the unweighted mean of per-sample means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError
from .model import ModelConfig, forward, upsample_to_full
from .trainer import batch_images


@dataclass
class EvalReport:
    per_sample: list  # (id, epe, n_valid)
    aggregate_epe: float
    n_samples: int
    excluded: list = field(default_factory=list)  # ids with no valid pixels

    def to_csv(self) -> str:
        lines = ["id,epe,n_valid"]
        for sid, value, n in self.per_sample:
            lines.append(f"{sid},{value:.10g},{n}")
        return "\n".join(lines) + "\n"


def epe(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Mean |pred - gt| over valid pixels; no disparity-range cap."""
    pred, gt, valid = np.asarray(pred), np.asarray(gt), np.asarray(valid, bool)
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ShapeError(f"epe shapes disagree: {pred.shape}, {gt.shape}, {valid.shape}")
    if not valid.any():
        raise DataError("EPE undefined: no valid pixels")
    diff = np.abs(pred.astype(np.float64) - gt.astype(np.float64))
    return float(diff[valid].mean())


def predict_disparity(params: dict, sample, config: ModelConfig) -> np.ndarray:
    """Full-resolution disparity for one sample (no gradients)."""
    left, right = batch_images([sample])
    h, w = sample.shape
    with ad.no_grad():
        out = forward(params, left, right, config)
        full = upsample_to_full(out.finest_disparity, h, w)
    return full.data[0]


def evaluate_dataset(params: dict, samples, config: ModelConfig) -> EvalReport:
    """Per-sample EPE via forward + upsample; aggregate is the mean of
    per-sample values. Samples without a single valid pixel are excluded and
    listed."""
    if not samples:
        raise DataError("no samples to evaluate")
    per_sample = []
    excluded = []
    for s in samples:
        if s.gt_disparity is None:
            raise DataError(f"sample {s.id} has no ground-truth disparity")
        valid = s.gt_valid if s.gt_valid is not None else np.ones(s.shape, bool)
        if not valid.any():
            excluded.append(s.id)
            continue
        pred = predict_disparity(params, s, config)
        per_sample.append((s.id, epe(pred, s.gt_disparity, valid), int(valid.sum())))
    if not per_sample:
        raise DataError("every sample was excluded: no valid pixels anywhere")
    aggregate = float(np.mean([v for _, v, _ in per_sample]))
    return EvalReport(per_sample=per_sample, aggregate_epe=aggregate, n_samples=len(per_sample), excluded=excluded)
