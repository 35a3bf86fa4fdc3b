"""Matching-cost-curve diagnostics.

For one left pixel, sweep candidate disparities along the epipolar line and
record the matching cost under a chosen metric: the photometric SSIM+L1 patch
cost at full resolution, or a feature dissimilarity (cosine/l1/l2) at one of
the encoder tap levels. Curve statistics quantify failure modes: softmax
entropy (ambiguity), basin width (how far descent converges to the minimum),
and cost inflation near disparity discontinuities (window tainting).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DataError
from .model import FEATURE_TAP_STRIDES, ModelConfig, forward
from .reconstruction import feature_dissimilarity, photometric_cost_map
from .trainer import batch_images

CURVE_METRICS = ("photometric", "cosine", "l1", "l2")
DEFAULT_TEMPERATURE = 0.1


@dataclass
class CostCurve:
    sample_id: str
    pixel: tuple  # (x, y) in full-resolution left-view coordinates
    metric: str
    level: int  # 1 for photometric, else the feature tap stride
    candidates: np.ndarray  # full-resolution disparities, unit step
    costs: np.ndarray
    oob: np.ndarray  # candidates whose support left the frame (cost clamped)
    gt_disparity: float | None = None

    def __post_init__(self):
        if len(self.candidates) != len(self.costs):
            raise ConfigError("candidates and costs must align")
        if not np.all(np.isfinite(self.costs)):
            raise ConfigError("curve costs must be finite")


@dataclass
class CurveStats:
    sample_id: str
    pixel: tuple
    metric: str
    argmin_disparity: float
    entropy: float
    basin_width: int
    cost_at_gt: float | None
    gt_disparity: float | None


# ------------------------------------------------------------- cost volumes


def _constant_shift_map(value: float, shape, dtype) -> ad.Tensor:
    return ad.Tensor(np.full((1,) + shape, value, dtype=dtype))


def photometric_cost_volume(sample, max_disp: int, patch_radius: int = 1):
    """(D+1, H, W) patch-mean photometric costs: entry d is the training cost
    map between the left image and the right image shifted by d, averaged
    over the (2r+1)^2 patch. Also returns the out-of-frame support flags."""
    h, w = sample.shape
    if max_disp >= w:
        raise ConfigError(f"max_disp={max_disp} must be < width {w}")
    left, right = batch_images([sample])
    vol = np.zeros((max_disp + 1, h, w), np.float64)
    oob = np.zeros((max_disp + 1, h, w), bool)
    xs = np.arange(w)
    lt = ad.Tensor(left.astype(np.float64))
    rt = ad.Tensor(right.astype(np.float64))
    with ad.no_grad():
        for d in range(max_disp + 1):
            warped, _ = ad.warp_horizontal(rt, _constant_shift_map(float(d), (h, w), np.float64))
            rho = photometric_cost_map(lt, warped)
            vol[d] = _patch_mean(rho.data[0], patch_radius)
            # the patch plus each column's SSIM window must stay in frame
            oob[d] = xs[None, :] < d + patch_radius + 1
    return vol, oob


def _patch_mean(arr: np.ndarray, r: int) -> np.ndarray:
    if r == 0:
        return arr
    pw = [(r, r), (r, r)]
    ap = np.pad(arr, pw, mode="reflect")
    out = np.zeros_like(arr)
    k = 2 * r + 1
    for dy in range(k):
        for dx in range(k):
            out += ap[dy : dy + arr.shape[0], dx : dx + arr.shape[1]]
    return out / (k * k)


def feature_cost_volume(sample, params, config: ModelConfig, metric: str, level: int, max_disp: int):
    """(D+1, h, w) dissimilarity between left features and right features
    shifted by d/level (bilinear for fractional shifts) at one tap level.
    Candidates are full-resolution pixels, unit step."""
    if metric not in ("cosine", "l1", "l2"):
        raise ConfigError(f"feature metric must be cosine/l1/l2, got {metric!r}")
    if level not in FEATURE_TAP_STRIDES:
        raise ConfigError(f"level must be one of {FEATURE_TAP_STRIDES}")
    h, w = sample.shape
    if max_disp >= w:
        raise ConfigError(f"max_disp={max_disp} must be < width {w}")
    left, right = batch_images([sample])
    with ad.no_grad():
        out = forward(params, left, right, config)
        f_l = out.features_left[FEATURE_TAP_STRIDES.index(level)]
        f_r = out.features_right[FEATURE_TAP_STRIDES.index(level)]
        hk, wk = f_l.data.shape[-2:]
        vol = np.zeros((max_disp + 1, hk, wk), np.float64)
        oob = np.zeros((max_disp + 1, hk, wk), bool)
        xs = np.arange(wk)
        for d in range(max_disp + 1):
            shift = d / level
            warped, inb = ad.warp_horizontal(f_r, _constant_shift_map(shift, (hk, wk), f_r.data.dtype))
            vol[d] = feature_dissimilarity(f_l, warped, metric).data[0]
            oob[d] = ~inb[0] | (xs[None, :] < shift)
    return vol, oob


def _to_level_coords(x: int, y: int, level: int, hk: int, wk: int):
    lx = min(int(np.floor(x / level + 0.5)), wk - 1)
    ly = min(int(np.floor(y / level + 0.5)), hk - 1)
    return lx, ly


def curve_from_volume(vol, oob, sample_id, pixel, metric, level, gt=None) -> CostCurve:
    x, y = pixel
    if level == 1:
        cx, cy = x, y
    else:
        cx, cy = _to_level_coords(x, y, level, vol.shape[1], vol.shape[2])
    costs = vol[:, cy, cx].astype(np.float64).copy()
    flags = oob[:, cy, cx].copy()
    if flags.all():
        raise DataError(f"pixel {pixel} has no in-frame candidates")
    if flags.any():
        costs[flags] = costs[~flags].max()  # +inf sentinel, clamped and flagged
    return CostCurve(
        sample_id=sample_id,
        pixel=(int(x), int(y)),
        metric=metric,
        level=level,
        candidates=np.arange(len(costs), dtype=np.float64),
        costs=costs,
        oob=flags,
        gt_disparity=None if gt is None else float(gt),
    )


def cost_curve(sample, params, pixel, max_disp: int, metric: str, patch_radius: int = 1,
               level: int | None = None, config: ModelConfig | None = None) -> CostCurve:
    """Matching-cost curve for one pixel. For feature metrics, `level` picks
    the tap stride (default 2, the finest) and `config` must describe params.
    """
    if metric not in CURVE_METRICS:
        raise ConfigError(f"metric must be one of {CURVE_METRICS}")
    x, y = pixel
    h, w = sample.shape
    if not (0 <= x < w and 0 <= y < h):
        raise ContractError(f"pixel {pixel} outside {h}x{w} image")
    gt = None
    if sample.gt_disparity is not None:
        gt = float(sample.gt_disparity[y, x])
    if metric == "photometric":
        vol, oob = photometric_cost_volume(sample, max_disp, patch_radius)
        return curve_from_volume(vol, oob, sample.id, pixel, metric, 1, gt)
    if config is None:
        raise ConfigError("feature metrics need the model config")
    level = 2 if level is None else level
    vol, oob = feature_cost_volume(sample, params, config, metric, level, max_disp)
    return curve_from_volume(vol, oob, sample.id, pixel, metric, level, gt)


# ------------------------------------------------------------------ metrics


def curve_entropy(curve: CostCurve, temperature: float = DEFAULT_TEMPERATURE) -> float:
    """Shannon entropy (nats) of softmax(-normalized costs / temperature).

    Costs are min-max normalized to [0,1] first (a constant curve normalizes
    to all zeros, giving the uniform distribution, entropy ln N); affine cost
    transforms therefore do not change the entropy.
    """
    if temperature <= 0:
        raise ContractError("temperature must be > 0")
    c = np.asarray(curve.costs, np.float64)
    span = c.max() - c.min()
    norm = np.zeros_like(c) if span == 0 else (c - c.min()) / span
    z = -norm / temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    return float(-(p * np.log(np.maximum(p, 1e-300))).sum())


def basin_width(curve: CostCurve) -> int:
    """Length of the maximal contiguous candidate interval around the global
    argmin on which costs are non-increasing toward it from both sides; ties
    extend the interval."""
    c = np.asarray(curve.costs, np.float64)
    if c.size == 0:
        raise ContractError("empty curve")
    m = int(np.argmin(c))
    i = m
    while i > 0 and c[i - 1] >= c[i]:
        i -= 1
    j = m
    while j < c.size - 1 and c[j + 1] >= c[j]:
        j += 1
    return j - i + 1


def curve_stats(curve: CostCurve, temperature: float = DEFAULT_TEMPERATURE) -> CurveStats:
    costs = np.asarray(curve.costs)
    arg = int(np.argmin(costs))
    cost_at_gt = None
    if curve.gt_disparity is not None:
        k = int(np.clip(np.floor(curve.gt_disparity + 0.5), 0, costs.size - 1))
        cost_at_gt = float(costs[k])
    return CurveStats(
        sample_id=curve.sample_id,
        pixel=curve.pixel,
        metric=curve.metric,
        argmin_disparity=float(curve.candidates[arg]),
        entropy=curve_entropy(curve, temperature),
        basin_width=basin_width(curve),
        cost_at_gt=cost_at_gt,
        gt_disparity=curve.gt_disparity,
    )


# -------------------------------------------------- discontinuity inflation


def disparity_edges(gt: np.ndarray, threshold: float = 1.0) -> np.ndarray:
    """Pixels adjacent to a ground-truth disparity jump > threshold."""
    edge = np.zeros(gt.shape, bool)
    dx = np.abs(np.diff(gt, axis=1)) > threshold
    edge[:, :-1] |= dx
    edge[:, 1:] |= dx
    dy = np.abs(np.diff(gt, axis=0)) > threshold
    edge[:-1] |= dy
    edge[1:] |= dy
    return edge


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(radius):
        grown = out.copy()
        grown[1:] |= out[:-1]
        grown[:-1] |= out[1:]
        grown[:, 1:] |= out[:, :-1]
        grown[:, :-1] |= out[:, 1:]
        out = grown
    return out


def boundary_cost_inflation(sample, params, metric: str, band: int = 2, n_pixels: int = 30,
                            rng=None, max_disp: int | None = None, config: ModelConfig | None = None,
                            patch_radius: int = 1, level: int = 2) -> dict:
    """Mean cost at the true disparity for non-occluded pixels near
    ground-truth disparity edges (within `band`) versus far from them
    (beyond 4*band). Ratios above 1 indicate cost tainting near
    discontinuities. Returns {'ratio', 'near_mean', 'far_mean', 'n_near',
    'n_far'}."""
    if sample.gt_disparity is None:
        raise DataError("boundary_cost_inflation needs ground-truth disparity")
    if band < 1:
        raise ContractError("band must be >= 1")
    h, w = sample.shape
    if band * 4 >= max(h, w):
        raise DataError(f"band {band} too large for a {h}x{w} image")
    rng = rng or np.random.default_rng(0)
    gt = sample.gt_disparity
    if max_disp is None:
        max_disp = int(np.ceil(gt.max())) + 1
    edges = disparity_edges(gt)
    near = _dilate(edges, band)
    far = ~_dilate(edges, 4 * band)
    not_occluded = ~sample.gt_occlusion if sample.gt_occlusion is not None else np.ones((h, w), bool)
    near &= not_occluded
    far &= not_occluded

    if metric == "photometric":
        vol, oob = photometric_cost_volume(sample, max_disp, patch_radius)
        scale = 1
    else:
        if config is None:
            raise ConfigError("feature metrics need the model config")
        vol, oob = feature_cost_volume(sample, params, config, metric, level, max_disp)
        scale = level

    def stratum_costs(mask):
        ys, xs = np.nonzero(mask)
        vals = []
        for y, x in zip(ys, xs):
            d = gt[y, x]
            if scale == 1:
                cx, cy, k = x, y, int(np.clip(np.floor(d + 0.5), 0, max_disp))
            else:
                cx, cy = _to_level_coords(x, y, scale, vol.shape[1], vol.shape[2])
                k = int(np.clip(np.floor(d + 0.5), 0, max_disp))
            if oob[k, cy, cx]:
                continue
            vals.append(vol[k, cy, cx])
        return vals

    near_costs = stratum_costs(near)
    far_costs = stratum_costs(far)
    if len(near_costs) < n_pixels or len(far_costs) < n_pixels:
        raise DataError(
            f"insufficient pixels: {len(near_costs)} near / {len(far_costs)} far, need {n_pixels}"
        )
    near_sel = rng.choice(len(near_costs), size=n_pixels, replace=False)
    far_sel = rng.choice(len(far_costs), size=n_pixels, replace=False)
    near_mean = float(np.mean([near_costs[i] for i in near_sel]))
    far_mean = float(np.mean([far_costs[i] for i in far_sel]))
    # exact toy reconstruction can drive the far mean to 0; keep the ratio finite
    ratio = near_mean / max(far_mean, 1e-12)
    return {
        "ratio": ratio,
        "near_mean": near_mean,
        "far_mean": far_mean,
        "n_near": n_pixels,
        "n_far": n_pixels,
    }


# ---------------------------------------------------------------- reporting


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.10g}"


def emit_report(curves, stats, out_dir) -> list:
    """Write curves.csv, stats.csv and one overlay plot per pixel. Returns
    the written paths. Reruns on identical inputs are byte-identical."""
    if not curves:
        raise DataError("no curves to report")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as e:
        raise DataError(f"cannot write to {out}: {e}") from e

    written = []
    curves_path = out / "curves.csv"
    with open(curves_path, "w") as f:
        f.write("sample_id,x,y,metric,level,d,cost\n")
        for c in curves:
            x, y = c.pixel
            for d, cost in zip(c.candidates, c.costs):
                f.write(f"{c.sample_id},{x},{y},{c.metric},{c.level},{_fmt(d)},{_fmt(cost)}\n")
    written.append(curves_path)

    stats_path = out / "stats.csv"
    with open(stats_path, "w") as f:
        f.write("sample_id,x,y,metric,entropy,argmin,basin_width,cost_at_gt,gt\n")
        for s in stats:
            x, y = s.pixel
            f.write(
                f"{s.sample_id},{x},{y},{s.metric},{_fmt(s.entropy)},{_fmt(s.argmin_disparity)},"
                f"{s.basin_width},{_fmt(s.cost_at_gt)},{_fmt(s.gt_disparity)}\n"
            )
    written.append(stats_path)

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_pixel = {}
    for c in curves:
        by_pixel.setdefault((c.sample_id, c.pixel), []).append(c)
    for (sid, (x, y)), group in by_pixel.items():
        fig, ax = plt.subplots(figsize=(6, 3.5), dpi=110)
        gt = next((c.gt_disparity for c in group if c.gt_disparity is not None), None)
        for c in group:
            label = c.metric if c.level == 1 else f"{c.metric}@{c.level}"
            (line,) = ax.plot(c.candidates, c.costs, label=label)
            arg = float(c.candidates[int(np.argmin(c.costs))])
            ax.axvline(arg, color=line.get_color(), linestyle="--", linewidth=0.9, alpha=0.7)
        if gt is not None:
            ax.axvline(gt, color="black", linestyle="--", linewidth=1.2, label="gt")
        ax.set_xlabel("candidate disparity [px]")
        ax.set_ylabel("matching cost")
        ax.set_title(f"{sid} ({x},{y})")
        ax.legend(fontsize=8)
        fig.tight_layout()
        plot_path = out / f"curve_{sid}_x{x}_y{y}.png"
        fig.savefig(plot_path)
        plt.close(fig)
        written.append(plot_path)
    return written
