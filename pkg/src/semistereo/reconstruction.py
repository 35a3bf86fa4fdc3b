"""Differentiable warping, nearest-neighbor disparity resampling, and the
training losses: photometric (SSIM + L1), deep-feature reconstruction
(cosine / l1 / l2), supervised disparity L1, and occlusion BCE, all with
occlusion masking.

Image/feature tensors are (N,C,H,W); disparity and mask maps are (N,H,W).
Single-image convenience paths accept H,W(,C) arrays and wrap them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ContractError, DegenerateBatchError, ShapeError

SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SSIM_ALPHA = 0.85
COSINE_EPS = 1e-8
_NORM_EPS = 1e-20  # keeps sqrt gradients finite for zero vectors

DFR_METRICS = ("cosine", "l1", "l2")


@dataclass
class LossReport:
    """Named scalar components of one step; total is the weighted sum in a
    fixed accumulation order (insertion order of `components`)."""

    components: dict = field(default_factory=dict)
    per_scale: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)
    total: float = 0.0
    n_valid_pixels: dict = field(default_factory=dict)
    skipped: bool = False
    note: str = ""
    feature_var: float | None = None  # representational-collapse monitor

    def finalize(self):
        total = 0.0
        for name, value in self.components.items():
            total += self.weights.get(name, 1.0) * value
        self.total = total
        return self


def scale_weights(n_scales: int):
    """Per-scale loss weights, coarsest first: the finest scale gets 1/2 and
    each coarser scale half of the next, with the coarsest repeated so the
    weights sum to exactly 1."""
    if n_scales == 1:
        return [1.0]
    w = [2.0 ** -(n_scales - 1)] + [2.0**-k for k in range(n_scales - 1, 0, -1)]
    return w


# ------------------------------------------------------------------- warping


def _as_nchw(img):
    """H,W(,C) array -> (1,C,H,W) Tensor; N,C,H,W arrays and Tensors pass
    through."""
    if isinstance(img, ad.Tensor):
        return img, False
    arr = np.asarray(img)
    if arr.ndim == 4:
        return ad.Tensor(arr), False
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return ad.Tensor(np.ascontiguousarray(arr.transpose(2, 0, 1))[None]), True


def warp_right_to_left(source, disparity):
    """Sample `source` at (x - d(x,y), y) with bilinear interpolation.

    Accepts an H,W(,C) array + H,W disparity (returns arrays) or (N,C,H,W) /
    (N,H,W) Tensors (returns a Tensor). Second return value is the in-bounds
    mask; out-of-bounds outputs are zero and excluded from it.
    """
    tensor_in = isinstance(source, ad.Tensor)
    src, single = _as_nchw(source)
    if isinstance(disparity, ad.Tensor):
        disp = disparity
    else:
        disp = ad.Tensor(np.asarray(disparity)[None] if single else np.asarray(disparity))
    if disp.data.shape[-2:] != src.data.shape[-2:]:
        raise ShapeError(f"disparity {disp.data.shape} does not match source {src.data.shape}")
    dd = disp.data
    if not np.all(np.isfinite(dd)) or dd.min() < 0:
        raise ContractError("disparity must be finite and >= 0")
    warped, inbounds = ad.warp_horizontal(src, disp)
    if tensor_in:
        return warped, inbounds
    if np.asarray(source).ndim == 4:
        return warped.data, inbounds
    out = warped.data[0].transpose(1, 2, 0)
    if np.asarray(source).ndim == 2:
        out = out[:, :, 0]
    return out, inbounds[0]


# ---------------------------------------------------------------- resampling


def resample_disparity_nn(disparity, target_h: int, target_w: int):
    """Nearest-neighbor downsample of a disparity map to (target_h, target_w),
    values multiplied by the width ratio so units are pixels at the target
    scale. Upsampling requests are a contract error (that direction belongs
    to upsample_to_full)."""
    t = disparity if isinstance(disparity, ad.Tensor) else ad.Tensor(np.asarray(disparity))
    h, w = t.data.shape[-2], t.data.shape[-1]
    if target_h > h or target_w > w:
        raise ContractError(f"resample_disparity_nn downsamples only: {h}x{w} -> {target_h}x{target_w}")
    out = ad.nn_downsample(t, target_h, target_w, value_scale=target_w / w)
    return out if isinstance(disparity, ad.Tensor) else out.data


def resample_mask_nn(mask: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Nearest-neighbor resample of a boolean map (no value scaling)."""
    iy = ad.nn_indices(mask.shape[-2], target_h)
    ix = ad.nn_indices(mask.shape[-1], target_w)
    return mask[..., iy[:, None], ix[None, :]]


# -------------------------------------------------------------------- SSIM


def ssim(x: ad.Tensor, y: ad.Tensor) -> ad.Tensor:
    """Per-pixel, per-channel SSIM over 3x3 reflect-padded windows with the
    standard stabilizers for [0,1-range images."""
    mu_x = ad.box3(x)
    mu_y = ad.box3(y)
    sigma_x = ad.box3(x * x) - mu_x * mu_x
    sigma_y = ad.box3(y * y) - mu_y * mu_y
    sigma_xy = ad.box3(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * sigma_xy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return num / den


def photometric_cost_map(left: ad.Tensor, warped: ad.Tensor) -> ad.Tensor:
    """Per-pixel reconstruction cost in [0,1]: alpha*(1-SSIM)/2 + (1-alpha)*L1,
    averaged over channels. Shape (N,H,W)."""
    ssim_cost = ad.clip((1.0 - ssim(left, warped)) * 0.5, 0.0, 1.0)
    l1 = ad.abs_(left - warped)
    rho = SSIM_ALPHA * ssim_cost + (1.0 - SSIM_ALPHA) * l1
    return rho.mean(axis=1)


def _masked_mean(values: ad.Tensor, mask: np.ndarray):
    n = int(mask.sum())
    if n == 0:
        raise DegenerateBatchError("no valid pixels to average over")
    m = mask.astype(values.data.dtype)
    return (values * ad.Tensor(m)).sum() * (1.0 / n), n


# ------------------------------------------------------------------- losses


def photometric_loss(left, right, disparity, mask):
    """View-reconstruction loss over mask AND in-bounds pixels.

    left/right: (N,C,H,W) Tensors or H,W,C arrays; disparity: full-resolution
    (N,H,W) or H,W; mask: matching bool map. Returns (scalar Tensor, n_valid).
    """
    left = left if isinstance(left, ad.Tensor) else _as_nchw(left)[0]
    right = right if isinstance(right, ad.Tensor) else _as_nchw(right)[0]
    if not isinstance(disparity, ad.Tensor):
        d = np.asarray(disparity)
        disparity = ad.Tensor(d[None] if d.ndim == 2 else d)
    warped, inbounds = warp_right_to_left(right, disparity)
    mask = np.asarray(mask, bool)
    if mask.ndim == 2:
        mask = mask[None]
    effective = mask & inbounds
    rho = photometric_cost_map(left, warped)
    return _masked_mean(rho, effective)


def feature_dissimilarity(f_left: ad.Tensor, f_warped: ad.Tensor, metric: str) -> ad.Tensor:
    """Per-pixel channel dissimilarity map (N,H,W)."""
    if metric == "cosine":
        num = (f_left * f_warped).sum(axis=1)
        na = ad.sqrt((f_left * f_left).sum(axis=1) + _NORM_EPS)
        nb = ad.sqrt((f_warped * f_warped).sum(axis=1) + _NORM_EPS)
        return 1.0 - num / (na * nb + COSINE_EPS)
    if metric == "l1":
        return ad.abs_(f_left - f_warped).mean(axis=1)
    if metric == "l2":
        diff = f_left - f_warped
        return ad.sqrt((diff * diff).sum(axis=1) + _NORM_EPS)
    raise ContractError(f"metric must be one of {DFR_METRICS}, got {metric!r}")


def dfr_loss(features_left, features_right, finest_disparity, occlusion_mask, metric="cosine",
             stop_gradient_features=False):
    """Feature-reconstruction loss over the three encoder tap levels.

    The finest disparity prediction (stride 2) is NN-resampled to each
    feature-map size; the right features are warped with it and compared to
    the left features under `metric`. The full-resolution validity mask is
    NN-resampled per level. Levels whose mask is empty contribute zero; all
    levels empty is a degenerate batch. Returns (scalar, n_valid, per_level).
    """
    if metric not in DFR_METRICS:
        raise ContractError(f"metric must be one of {DFR_METRICS}, got {metric!r}")
    occlusion_mask = np.asarray(occlusion_mask, bool)
    if occlusion_mask.ndim == 2:
        occlusion_mask = occlusion_mask[None]
    per_level = []
    total = None
    n_total = 0
    for f_l, f_r in zip(features_left, features_right):
        if stop_gradient_features:
            f_l, f_r = f_l.detach(), f_r.detach()
        hk, wk = f_l.data.shape[-2], f_l.data.shape[-1]
        d_k = resample_disparity_nn(finest_disparity, hk, wk)
        mask_k = resample_mask_nn(occlusion_mask, hk, wk)
        warped, inbounds = ad.warp_horizontal(f_r, d_k)
        effective = mask_k & inbounds
        n_k = int(effective.sum())
        if n_k == 0:
            per_level.append(0.0)
            continue
        delta = feature_dissimilarity(f_l, warped, metric)
        level_loss = (delta * ad.Tensor(effective.astype(delta.data.dtype))).sum() * (1.0 / n_k)
        per_level.append(float(level_loss.data))
        n_total += n_k
        total = level_loss if total is None else total + level_loss
    if total is None:
        raise DegenerateBatchError("feature-reconstruction mask empty at every level")
    return total * (1.0 / len(features_left)), n_total, per_level


def supervised_disparity_loss(disparity_pyramid, gt_disparity, gt_valid=None):
    """Per-scale L1 against NN-downsampled ground truth, weighted
    coarsest-to-finest by scale_weights. Returns (scalar, per_scale, n_valid).
    """
    gt = np.asarray(gt_disparity)
    if gt.ndim == 2:
        gt = gt[None]
    valid = np.ones(gt.shape, bool) if gt_valid is None else np.asarray(gt_valid, bool)
    if valid.ndim == 2:
        valid = valid[None]
    weights = scale_weights(len(disparity_pyramid))
    full_w = gt.shape[-1]
    total = None
    per_scale = []
    n_total = 0
    for w_s, pred in zip(weights, disparity_pyramid):
        hk, wk = pred.data.shape[-2], pred.data.shape[-1]
        iy, ix = ad.nn_indices(gt.shape[-2], hk), ad.nn_indices(full_w, wk)
        gt_k = gt[..., iy[:, None], ix[None, :]] * (wk / full_w)
        valid_k = valid[..., iy[:, None], ix[None, :]]
        n_k = int(valid_k.sum())
        if n_k == 0:
            per_scale.append(0.0)
            continue
        err = ad.abs_(pred - ad.Tensor(gt_k.astype(pred.data.dtype)))
        l_s = (err * ad.Tensor(valid_k.astype(pred.data.dtype))).sum() * (1.0 / n_k)
        per_scale.append(float(l_s.data))
        n_total += n_k
        term = l_s * w_s
        total = term if total is None else total + term
    if total is None:
        raise DegenerateBatchError("ground-truth disparity has no valid pixels at any scale")
    return total, per_scale, n_total


def occlusion_loss(occlusion_logits_pyramid, gt_occlusion, supervision_mask):
    """Per-scale binary cross entropy of sigmoid(logits) against occlusion
    targets (occluded = 1), averaged over the NN-downsampled supervision mask,
    with the same per-scale weights as the disparity loss."""
    occ = np.asarray(gt_occlusion, bool)
    if occ.ndim == 2:
        occ = occ[None]
    sup = np.asarray(supervision_mask, bool)
    if sup.ndim == 2:
        sup = sup[None]
    weights = scale_weights(len(occlusion_logits_pyramid))
    total = None
    per_scale = []
    n_total = 0
    for w_s, logits in zip(weights, occlusion_logits_pyramid):
        hk, wk = logits.data.shape[-2], logits.data.shape[-1]
        target_k = resample_mask_nn(occ, hk, wk)
        mask_k = resample_mask_nn(sup, hk, wk)
        n_k = int(mask_k.sum())
        if n_k == 0:
            per_scale.append(0.0)
            continue
        bce = ad.bce_with_logits(logits, target_k.astype(logits.data.dtype))
        l_s = (bce * ad.Tensor(mask_k.astype(logits.data.dtype))).sum() * (1.0 / n_k)
        per_scale.append(float(l_s.data))
        n_total += n_k
        term = l_s * w_s
        total = term if total is None else total + term
    if total is None:
        raise DegenerateBatchError("occlusion supervision mask empty at every scale")
    return total, per_scale, n_total


def mask_from_occlusion(occlusion_logits, threshold: float, target_h: int, target_w: int) -> np.ndarray:
    """Binarized validity mask from the finest occlusion logits: bilinearly
    upsampled to full resolution, a pixel participates in the self-supervised
    loss when sigmoid(logit) < threshold (strictly; ties count as occluded).
    No gradient flows through the binarization."""
    if not 0.0 < threshold < 1.0:
        raise ContractError("threshold must lie in (0, 1)")
    logits = occlusion_logits.data if isinstance(occlusion_logits, ad.Tensor) else np.asarray(occlusion_logits)
    squeeze = logits.ndim == 2
    if squeeze:
        logits = logits[None]
    with ad.no_grad():
        full = ad.resize_bilinear(ad.Tensor(logits), target_h, target_w).data
    mask = ad.sigmoid_np(full) < threshold
    return mask[0] if squeeze else mask
