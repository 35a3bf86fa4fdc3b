"""Occlusion ground truth for synthetic data and synthetic-occluder
augmentation for real samples."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import StereoSample, _u8_to_float
from .errors import ConfigError, ContractError, ShapeError

MIN_PATCH = 8


@dataclass(frozen=True)
class OccluderPatch:
    rect: tuple  # (x0, y0, w, h) in left-view pixels
    texture: np.ndarray  # h, w, 3 in [0,1]
    source: str = "noise"  # 'noise' or 'copied-from-image'

    def validate(self, image_shape):
        ih, iw = image_shape[:2]
        x0, y0, w, h = self.rect
        limit = min(ih, iw) // 3
        if w < MIN_PATCH or h < MIN_PATCH or w > limit or h > limit:
            raise ConfigError(f"occluder sides must lie in [{MIN_PATCH}, {limit}], got {w}x{h}")
        if x0 < 0 or y0 < 0 or x0 + w > iw or y0 + h > ih:
            raise ConfigError(f"occluder rect {self.rect} exceeds image bounds {ih}x{iw}")
        if self.texture.shape[:2] != (h, w):
            raise ConfigError("occluder texture does not match its rect")
        if self.source not in ("noise", "copied-from-image"):
            raise ConfigError(f"unknown occluder source {self.source!r}")


def occlusion_from_disparity(d_left: np.ndarray, d_right: np.ndarray, tol: float = 1.0) -> np.ndarray:
    """Left-right consistency check: a left pixel is occluded when its match
    point leaves the frame or the right-view disparity there (nearest sample)
    disagrees by more than tol."""
    if d_left.shape != d_right.shape:
        raise ShapeError(f"disparity maps disagree: {d_left.shape} vs {d_right.shape}")
    if tol <= 0:
        raise ContractError("tol must be > 0")
    h, w = d_left.shape
    u = np.arange(w)[None, :] - d_left
    ui = np.clip(np.floor(u + 0.5).astype(np.int64), 0, w - 1)
    sampled = d_right[np.arange(h)[:, None], ui]
    return (u < 0) | ((np.abs(d_left - sampled) > tol) & (u >= 0))


def occlusion_by_forward_projection(d_left: np.ndarray) -> np.ndarray:
    """Brute-force reference: project every left pixel into the right view;
    a pixel is occluded when its (rounded) target is claimed by a strictly
    larger disparity, or falls out of frame."""
    h, w = d_left.shape
    xs = np.arange(w)[None, :]
    t = np.floor(xs - d_left + 0.5).astype(np.int64)
    valid = t >= 0  # d >= 0 keeps t < w
    rows = np.broadcast_to(np.arange(h)[:, None], (h, w))
    flat = rows * w + np.clip(t, 0, w - 1)
    claimed = np.full(h * w, -np.inf)
    np.maximum.at(claimed, flat[valid], d_left[valid].astype(np.float64))
    return ~valid | (claimed[flat] > d_left)


def derive_occlusion(sample: StereoSample) -> np.ndarray:
    """Occlusion supervision target: dataset-provided map when present, else
    forward projection of the ground-truth disparity."""
    if sample.gt_occlusion is not None:
        return sample.gt_occlusion
    if sample.gt_disparity is None:
        raise ContractError(f"sample {sample.id} has no disparity to derive occlusion from")
    return occlusion_by_forward_projection(sample.gt_disparity)


def add_synthetic_occluder(sample: StereoSample, rng: np.random.Generator, source: str = "noise"):
    """Paste an unmatchable patch into the right image and report the same
    rectangle in left-view coordinates as presumed-occluded.

    The left-view labeling ignores the scene's own disparity (unknown for
    real data); with patches >= 8px that offset is small. Returns
    (augmented sample, occluder mask).
    """
    if sample.domain != "real":
        raise ContractError("synthetic occluders are for real-domain samples only")
    ih, iw = sample.shape
    limit = min(ih, iw) // 3
    if limit < MIN_PATCH:
        raise ConfigError(f"image {ih}x{iw} too small for a {MIN_PATCH}px occluder")
    w = int(rng.integers(MIN_PATCH, limit + 1))
    h = int(rng.integers(MIN_PATCH, limit + 1))
    x0 = int(rng.integers(0, iw - w + 1))
    y0 = int(rng.integers(0, ih - h + 1))
    if source == "noise":
        texture = _u8_to_float(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
    elif source == "copied-from-image":
        cx = int(rng.integers(0, iw - w + 1))
        cy = int(rng.integers(0, ih - h + 1))
        texture = sample.right[cy : cy + h, cx : cx + w].copy()
    else:
        raise ConfigError(f"unknown occluder source {source!r}")
    patch = OccluderPatch((x0, y0, w, h), texture, source)
    patch.validate((ih, iw))
    right = sample.right.copy()
    right[y0 : y0 + h, x0 : x0 + w] = texture
    mask = np.zeros((ih, iw), bool)
    mask[y0 : y0 + h, x0 : x0 + w] = True
    return replace(sample, right=right), mask
