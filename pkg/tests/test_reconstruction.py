import math

import numpy as np
import pytest

from semistereo import autodiff as ad
from semistereo.data import ToySceneSpec, generate_toy_pair
from semistereo.errors import ContractError, DegenerateBatchError, ShapeError
from semistereo.reconstruction import (
    dfr_loss,
    feature_dissimilarity,
    mask_from_occlusion,
    occlusion_loss,
    photometric_loss,
    resample_disparity_nn,
    resample_mask_nn,
    scale_weights,
    supervised_disparity_loss,
    warp_right_to_left,
)
from util import gradcheck


def chw(img):
    return np.ascontiguousarray(np.asarray(img).transpose(2, 0, 1))[None]


def dilate(mask, r=1):
    out = mask.copy()
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            shifted = np.roll(np.roll(mask, dy, axis=0), dx, axis=1)
            if dy > 0:
                shifted[:dy] = False
            elif dy < 0:
                shifted[dy:] = False
            if dx > 0:
                shifted[:, :dx] = False
            elif dx < 0:
                shifted[:, dx:] = False
            out |= shifted
    return out


# ------------------------------------------------------------------- warping


def test_warp_identity_bit_exact():
    rng = np.random.default_rng(0)
    src = rng.random((6, 9, 3)).astype(np.float32)
    warped, inb = warp_right_to_left(src, np.zeros((6, 9), np.float32))
    assert np.array_equal(warped, src)
    assert inb.all()


def test_warp_constant_shift_on_ramp():
    w = 12
    ramp = np.broadcast_to(np.arange(w, dtype=np.float64), (4, w)).copy()
    warped, inb = warp_right_to_left(ramp, np.full((4, w), 2.5))
    xs = np.arange(w, dtype=np.float64)
    assert np.allclose(warped[:, 3:], (xs - 2.5)[3:])
    assert not inb[:, :2].any() and inb[:, 3:].all()


def test_warp_full_out_of_bounds():
    src = np.ones((3, 5, 2), np.float32)
    warped, inb = warp_right_to_left(src, np.full((3, 5), 5.0, np.float32))
    assert not inb.any()
    assert np.all(warped == 0)


def test_warp_rejects_negative_disparity():
    src = np.ones((3, 5), np.float32)
    with pytest.raises(ContractError):
        warp_right_to_left(src, np.full((3, 5), -0.5, np.float32))
    with pytest.raises(ShapeError):
        warp_right_to_left(src, np.zeros((3, 6), np.float32))


def test_warp_linear_in_source():
    rng = np.random.default_rng(1)
    a = rng.random((5, 8, 2))
    b = rng.random((5, 8, 2))
    d = rng.uniform(0, 3, (5, 8))
    ca, cb = 0.7, -1.3
    w_ab, _ = warp_right_to_left(ca * a + cb * b, d)
    w_a, _ = warp_right_to_left(a, d)
    w_b, _ = warp_right_to_left(b, d)
    assert np.allclose(w_ab, ca * w_a + cb * w_b, atol=1e-12)


# ---------------------------------------------------------------- resampling


def test_resample_identity_and_halving():
    m = np.random.default_rng(0).random((16, 16)).astype(np.float32)
    assert np.array_equal(resample_disparity_nn(m, 16, 16), m)
    out = resample_disparity_nn(np.full((16, 16), 8.0, np.float32), 8, 8)
    assert np.allclose(out, 4.0)


def test_resample_value_set_property():
    rng = np.random.default_rng(2)
    m = rng.integers(0, 30, (12, 20)).astype(np.float32)
    out = resample_disparity_nn(m, 6, 10)
    allowed = set((m * 0.5).ravel().tolist())
    assert set(out.ravel().tolist()) <= allowed


def test_resample_rejects_upsampling():
    with pytest.raises(ContractError):
        resample_disparity_nn(np.zeros((4, 4), np.float32), 8, 8)


def test_resample_mask_nn_keeps_bool():
    m = np.zeros((8, 8), bool)
    m[0::2] = True
    out = resample_mask_nn(m, 4, 4)
    assert out.dtype == np.bool_ and out.shape == (4, 4)


# -------------------------------------------------------------- photometric


def test_photometric_zero_disparity_scene_exact_zero():
    s = generate_toy_pair(ToySceneSpec(width=64, height=32, n_layers=1, disparity_range=(0, 0)), 2)
    loss, n = photometric_loss(chw(s.left), chw(s.right), s.gt_disparity[None], ~s.gt_occlusion[None])
    assert float(loss.data) == 0.0
    assert n == 64 * 32


def test_photometric_ground_truth_reconstruction_exact_zero():
    # window-eroded mask: SSIM windows of kept pixels see only perfect pixels
    s = generate_toy_pair(ToySceneSpec(width=64, height=32, n_layers=2, disparity_range=(2, 8)), 3)
    mask = ~dilate(s.gt_occlusion, 1)
    assert mask.sum() > 100
    loss, _ = photometric_loss(chw(s.left), chw(s.right), s.gt_disparity[None], mask[None])
    assert float(loss.data) == 0.0


def test_photometric_wrong_disparity_positive():
    s = generate_toy_pair(ToySceneSpec(width=64, height=32, n_layers=2, disparity_range=(2, 8)), 3)
    mask = ~dilate(s.gt_occlusion, 1)
    loss, _ = photometric_loss(chw(s.left), chw(s.right), s.gt_disparity[None] + 2.0, mask[None])
    assert float(loss.data) > 1e-3


def test_photometric_constant_images():
    img = np.full((8, 10, 3), 0.3, np.float32)
    # keep pixels whose SSIM windows never touch the zero-filled
    # out-of-bounds columns on the left edge
    mask = np.zeros((8, 10), bool)
    mask[:, 4:] = True
    # integer shift: bilinear copy is exact, SSIM of identical constants is 1
    loss, _ = photometric_loss(chw(img), chw(img), np.full((8, 10), 2.0, np.float32), mask)
    assert float(loss.data) == 0.0
    loss, _ = photometric_loss(chw(img), chw(img), np.full((8, 10), 1.7, np.float32), mask)
    assert abs(float(loss.data)) < 1e-6


def test_photometric_bounds_and_degenerate():
    rng = np.random.default_rng(4)
    left = rng.random((1, 3, 8, 8))
    right = rng.random((1, 3, 8, 8))
    d = rng.uniform(0, 3, (1, 8, 8))
    loss, _ = photometric_loss(left, right, d, np.ones((1, 8, 8), bool))
    assert 0.0 <= float(loss.data) <= 1.0
    with pytest.raises(DegenerateBatchError):
        photometric_loss(left, right, d, np.zeros((1, 8, 8), bool))
    with pytest.raises(DegenerateBatchError):
        # mask nonempty but fully out of bounds after warping
        photometric_loss(left, right, np.full((1, 8, 8), 8.0), np.ones((1, 8, 8), bool))


def test_photometric_gradient_matches_fd():
    rng = np.random.default_rng(5)
    left = rng.random((1, 3, 8, 8))
    right = rng.random((1, 3, 8, 8))
    mask = np.ones((1, 8, 8), bool)
    d0 = rng.uniform(0.2, 2.7, (1, 8, 8))
    gradcheck(lambda t: photometric_loss(ad.Tensor(left), ad.Tensor(right), t, mask)[0], d0)


def test_photometric_masked_pixel_independence():
    s = generate_toy_pair(ToySceneSpec(width=32, height=16, n_layers=2, disparity_range=(1, 5)), 6)
    rng = np.random.default_rng(7)
    d = s.gt_disparity + rng.uniform(0, 1, s.gt_disparity.shape).astype(np.float32)
    mask = np.zeros((16, 32), bool)
    mask[4:10, 8:20] = True
    base, _ = photometric_loss(chw(s.left), chw(s.right), d[None], mask[None])
    # perturb left pixels whose 3x3 window no kept pixel sees, and right
    # pixels outside every kept pixel's warp support
    safe_left = ~dilate(mask, 1)
    left2 = s.left.copy()
    left2[safe_left] = rng.random((int(safe_left.sum()), 3)).astype(np.float32)
    touched = np.zeros((16, 32), bool)
    ys, xs = np.nonzero(dilate(mask, 1))
    for y, x in zip(ys, xs):
        u = x - d[y, x]
        for xi in range(int(np.floor(u)) - 1, int(np.ceil(u)) + 2):
            if 0 <= xi < 32:
                touched[y, xi] = True
    right2 = s.right.copy()
    safe_right = ~touched
    right2[safe_right] = rng.random((int(safe_right.sum()), 3)).astype(np.float32)
    pert, _ = photometric_loss(chw(left2), chw(right2), d[None], mask[None])
    assert float(pert.data) == float(base.data)


# ---------------------------------------------------------------------- DFR


def _pyramid(rng, channels=3, sizes=((8, 12), (4, 6), (2, 3)), dtype=np.float64):
    return [ad.Tensor(rng.standard_normal((1, channels, h, w)).astype(dtype)) for h, w in sizes]


def test_dfr_identical_features_zero():
    rng = np.random.default_rng(0)
    f = _pyramid(rng)
    d = ad.Tensor(np.zeros((1, 8, 12)))
    loss, n, per = dfr_loss(f, f, d, np.ones((1, 16, 24), bool), "cosine")
    # the stabilizing epsilon in the cosine denominator leaves ~eps/|v|^2
    assert abs(float(loss.data)) < 1e-7
    assert len(per) == 3 and n > 0


def test_dfr_antiparallel_and_orthogonal():
    sizes = ((8, 12), (4, 6), (2, 3))
    v = [np.full((1, 2, h, w), 0.7) for h, w in sizes]
    f_l = [ad.Tensor(x) for x in v]
    f_r = [ad.Tensor(-x) for x in v]
    d = ad.Tensor(np.zeros((1, 8, 12)))
    loss, _, _ = dfr_loss(f_l, f_r, d, np.ones((1, 16, 24), bool), "cosine")
    assert abs(float(loss.data) - 2.0) < 1e-6
    # orthogonal channels: left lives in channel 0, right in channel 1
    f_l = [ad.Tensor(np.stack([np.ones((1, h, w)), np.zeros((1, h, w))], axis=1)) for h, w in sizes]
    f_r = [ad.Tensor(np.stack([np.zeros((1, h, w)), np.ones((1, h, w))], axis=1)) for h, w in sizes]
    loss, _, _ = dfr_loss(f_l, f_r, d, np.ones((1, 16, 24), bool), "cosine")
    assert abs(float(loss.data) - 1.0) < 1e-6


def _dfr_brute_force(f_ls, f_rs, finest_d, mask_full, metric):
    """Independent per-pixel loop implementation of the feature loss."""

    def nn_idx(n_in, n_out):
        return [
            min(n_in - 1, max(0, math.floor((i + 0.5) * n_in / n_out - 0.5 + 0.5)))
            for i in range(n_out)
        ]

    hd, wd = finest_d.shape
    hm, wm = mask_full.shape
    levels = []
    for f_l, f_r in zip(f_ls, f_rs):
        c, h, w = f_l.shape
        iy_d, ix_d = nn_idx(hd, h), nn_idx(wd, w)
        iy_m, ix_m = nn_idx(hm, h), nn_idx(wm, w)
        acc, n = 0.0, 0
        for y in range(h):
            for x in range(w):
                if not mask_full[iy_m[y], ix_m[x]]:
                    continue
                d = finest_d[iy_d[y], ix_d[x]] * (w / wd)
                u = x - d
                if u < 0 or u > w - 1:
                    continue
                x0 = int(math.floor(u))
                x1 = min(x0 + 1, w - 1)
                f = u - x0
                fw = (1 - f) * f_r[:, y, x0] + f * f_r[:, y, x1]
                fl = f_l[:, y, x]
                if metric == "cosine":
                    na = float(np.linalg.norm(fl))
                    nb = float(np.linalg.norm(fw))
                    val = 1.0 - float(fl @ fw) / (na * nb + 1e-8)
                elif metric == "l1":
                    val = float(np.abs(fl - fw).mean())
                else:
                    val = float(np.linalg.norm(fl - fw))
                acc += val
                n += 1
        levels.append(acc / n if n else 0.0)
    return sum(levels) / len(levels)


@pytest.mark.parametrize("metric", ["cosine", "l1", "l2"])
def test_dfr_matches_brute_force(metric):
    rng = np.random.default_rng(8)
    f_l = _pyramid(rng)
    f_r = _pyramid(rng)
    d = rng.uniform(0, 2.5, (1, 8, 12))
    mask = rng.random((1, 16, 24)) > 0.3
    loss, _, _ = dfr_loss(f_l, f_r, ad.Tensor(d), mask, metric)
    ref = _dfr_brute_force(
        [t.data[0] for t in f_l], [t.data[0] for t in f_r], d[0], mask[0], metric
    )
    assert abs(float(loss.data) - ref) <= 1e-6


def test_dfr_cosine_scale_invariance():
    rng = np.random.default_rng(9)
    f_l = _pyramid(rng)
    f_r = _pyramid(rng)
    d = ad.Tensor(rng.uniform(0, 2, (1, 8, 12)))
    mask = np.ones((1, 16, 24), bool)
    base, _, _ = dfr_loss(f_l, f_r, d, mask, "cosine")
    scaled = [ad.Tensor(t.data * rng.uniform(0.2, 5.0, (1, 1) + t.data.shape[2:])) for t in f_l]
    pert, _, _ = dfr_loss(scaled, f_r, d, mask, "cosine")
    assert abs(float(base.data) - float(pert.data)) < 1e-6


def test_dfr_metric_changes_value():
    rng = np.random.default_rng(10)
    f_l, f_r = _pyramid(rng), _pyramid(rng)
    d = ad.Tensor(rng.uniform(0, 2, (1, 8, 12)))
    mask = np.ones((1, 16, 24), bool)
    vals = {m: float(dfr_loss(f_l, f_r, d, mask, m)[0].data) for m in ("cosine", "l1", "l2")}
    assert len(set(vals.values())) == 3


def test_dfr_degenerate_and_bad_metric():
    rng = np.random.default_rng(11)
    f = _pyramid(rng)
    d = ad.Tensor(np.zeros((1, 8, 12)))
    with pytest.raises(DegenerateBatchError):
        dfr_loss(f, f, d, np.zeros((1, 16, 24), bool), "cosine")
    with pytest.raises(ContractError):
        dfr_loss(f, f, d, np.ones((1, 16, 24), bool), "hamming")


def test_dfr_gradient_matches_fd():
    rng = np.random.default_rng(12)
    f_l = _pyramid(rng, sizes=((8, 8), (4, 4), (2, 2)))
    f_r = _pyramid(rng, sizes=((8, 8), (4, 4), (2, 2)))
    mask = np.ones((1, 16, 16), bool)
    d0 = rng.uniform(0.2, 1.7, (1, 8, 8))
    for metric in ("cosine", "l1", "l2"):
        gradcheck(lambda t, m=metric: dfr_loss(f_l, f_r, t, mask, m)[0], d0.copy())


def test_dfr_stop_gradient_blocks_features():
    rng = np.random.default_rng(13)
    f_l = [ad.Tensor(t.data, requires_grad=True) for t in _pyramid(rng)]
    f_r = [ad.Tensor(t.data, requires_grad=True) for t in _pyramid(rng)]
    d = ad.Tensor(rng.uniform(0, 2, (1, 8, 12)), requires_grad=True)
    mask = np.ones((1, 16, 24), bool)
    loss, _, _ = dfr_loss(f_l, f_r, d, mask, "cosine", stop_gradient_features=True)
    loss.backward()
    assert d.grad is not None
    assert all(t.grad is None for t in f_l) and all(t.grad is None for t in f_r)


def test_dfr_masked_feature_independence():
    rng = np.random.default_rng(14)
    f_l = _pyramid(rng)
    f_r = _pyramid(rng)
    d = ad.Tensor(np.zeros((1, 8, 12)))  # identity warp: masks align exactly
    mask_full = rng.random((1, 16, 24)) > 0.5
    base, _, _ = dfr_loss(f_l, f_r, d, mask_full, "cosine")
    f_l2 = []
    for t in f_l:
        h, w = t.data.shape[2:]
        level_mask = resample_mask_nn(mask_full, h, w)
        data = t.data.copy()
        data[:, :, ~level_mask[0]] = rng.standard_normal(data[:, :, ~level_mask[0]].shape)
        f_l2.append(ad.Tensor(data))
    pert, _, _ = dfr_loss(f_l2, f_r, d, mask_full, "cosine")
    assert float(pert.data) == float(base.data)


# ------------------------------------------------- supervised disparity loss


def _pred_pyramid(gt, strides=(64, 32, 16, 8, 4, 2), offset=0.0, dtype=np.float64):
    h, w = gt.shape
    pyr = []
    for s in strides:
        hk, wk = h // s, w // s
        iy, ix = ad.nn_indices(h, hk), ad.nn_indices(w, wk)
        gt_k = gt[iy[:, None], ix[None, :]] * (wk / w)
        pyr.append(ad.Tensor(gt_k[None].astype(dtype) + offset))
    return pyr


def test_scale_weights_match_doubling_rule():
    assert scale_weights(6) == [1 / 32, 1 / 32, 1 / 16, 1 / 8, 1 / 4, 1 / 2]
    assert sum(scale_weights(6)) == 1.0
    assert scale_weights(1) == [1.0]
    assert sum(scale_weights(4)) == 1.0


def test_supervised_zero_when_pred_equals_resampled_gt():
    rng = np.random.default_rng(0)
    gt = rng.uniform(0, 20, (64, 128)).astype(np.float64)
    loss, per_scale, _ = supervised_disparity_loss(_pred_pyramid(gt), gt[None])
    assert float(loss.data) == 0.0
    assert per_scale == [0.0] * 6


def test_supervised_constant_offset_is_weight_sum():
    rng = np.random.default_rng(1)
    gt = rng.uniform(0, 20, (64, 128)).astype(np.float64)
    loss, _, _ = supervised_disparity_loss(_pred_pyramid(gt, offset=1.0), gt[None])
    assert abs(float(loss.data) - 1.0) < 1e-12


def test_supervised_single_valid_pixel():
    gt = np.full((64, 128), 6.0)
    valid = np.zeros((64, 128), bool)
    # odd coordinates survive the stride-2 NN downsample (ties round up)
    valid[11, 21] = True
    pyr = _pred_pyramid(gt, offset=0.5)
    loss, per_scale, n = supervised_disparity_loss(pyr, gt[None], valid[None])
    # only the finest scale keeps the pixel: loss = w_finest * |0.5|
    assert abs(float(loss.data) - 0.5 * 0.5) < 1e-12
    assert n == 1
    assert per_scale[-1] == 0.5 and all(v == 0.0 for v in per_scale[:-1])


def test_supervised_all_invalid_degenerate():
    gt = np.zeros((64, 128))
    with pytest.raises(DegenerateBatchError):
        supervised_disparity_loss(_pred_pyramid(gt), gt[None], np.zeros((1, 64, 128), bool))


# ------------------------------------------------------------ occlusion loss


def _logit_pyramid(value_map, strides=(64, 32, 16, 8, 4, 2)):
    h, w = value_map.shape
    pyr = []
    for s in strides:
        hk, wk = h // s, w // s
        iy, ix = ad.nn_indices(h, hk), ad.nn_indices(w, wk)
        pyr.append(ad.Tensor(value_map[iy[:, None], ix[None, :]][None]))
    return pyr


def test_occlusion_loss_saturated_correct_is_tiny():
    rng = np.random.default_rng(2)
    occ = rng.random((64, 128)) > 0.7
    logits = np.where(occ, 100.0, -100.0)
    loss, _, _ = occlusion_loss(_logit_pyramid(logits), occ[None], np.ones((1, 64, 128), bool))
    assert float(loss.data) < 1e-8


def test_occlusion_loss_zero_logits_is_ln2():
    rng = np.random.default_rng(3)
    occ = rng.random((64, 128)) > 0.5
    loss, per_scale, _ = occlusion_loss(
        _logit_pyramid(np.zeros((64, 128))), occ[None], np.ones((1, 64, 128), bool)
    )
    assert abs(float(loss.data) - math.log(2)) < 1e-12
    assert all(abs(v - math.log(2)) < 1e-12 for v in per_scale)


def test_occlusion_loss_inverted_saturated_is_large():
    rng = np.random.default_rng(4)
    occ = rng.random((64, 128)) > 0.5
    logits = np.where(occ, -100.0, 100.0)
    loss, _, _ = occlusion_loss(_logit_pyramid(logits), occ[None], np.ones((1, 64, 128), bool))
    assert float(loss.data) > 10.0


def test_occlusion_loss_empty_mask():
    with pytest.raises(DegenerateBatchError):
        occlusion_loss(
            _logit_pyramid(np.zeros((64, 128))),
            np.zeros((1, 64, 128), bool),
            np.zeros((1, 64, 128), bool),
        )


# --------------------------------------------------------- binarized masking


def test_mask_from_occlusion_saturated_and_tie():
    logits = np.full((1, 8, 16), -100.0)
    assert mask_from_occlusion(logits, 0.5, 16, 32).all()
    logits = np.full((1, 8, 16), 100.0)
    assert not mask_from_occlusion(logits, 0.5, 16, 32).any()
    logits = np.zeros((1, 8, 16))
    # sigmoid(0)=0.5 is not < 0.5: the tie counts as occluded
    assert not mask_from_occlusion(logits, 0.5, 16, 32).any()


def test_mask_from_occlusion_threshold_contract():
    with pytest.raises(ContractError):
        mask_from_occlusion(np.zeros((1, 4, 4)), 0.0, 8, 8)
    with pytest.raises(ContractError):
        mask_from_occlusion(np.zeros((1, 4, 4)), 1.0, 8, 8)
