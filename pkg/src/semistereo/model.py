"""Siamese encoder with a one-sided 1-D correlation layer and a six-scale
decoder emitting disparity and occlusion-logit pyramids, plus feature taps
from the three shared encoder levels (strides 2, 4, 8) for the
feature-reconstruction loss.

Disparity maps are in pixels at their own scale; the pyramids run coarsest to
finest (stride 64 down to stride 2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import serialization
from .errors import ConfigError, ShapeError

FEATURE_TAP_STRIDES = (2, 4, 8)
DECODER_STRIDES = (64, 32, 16, 8, 4, 2)
LEAK = 0.1


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8  # 64 at paper scale; 8 trains on a CPU
    max_displacement: int = 40  # one-sided, in pixels at correlation stride 8
    n_scales: int = 6
    disparity_activation: str = "relu"  # or 'softplus'

    def validate(self):
        if self.base_channels < 2 or self.base_channels % 2:
            raise ConfigError("base_channels must be an even count >= 2")
        if self.max_displacement < 1:
            raise ConfigError("max_displacement must be >= 1")
        if not 1 <= self.n_scales <= len(DECODER_STRIDES):
            raise ConfigError(f"n_scales must be in [1, {len(DECODER_STRIDES)}]")
        if self.disparity_activation not in ("relu", "softplus"):
            raise ConfigError("disparity_activation must be 'relu' or 'softplus'")

    @property
    def strides(self):
        """Output strides, coarsest first."""
        return DECODER_STRIDES[len(DECODER_STRIDES) - self.n_scales :]

    @property
    def divisor(self) -> int:
        return DECODER_STRIDES[0]


@dataclass
class NetworkOutput:
    disparity_pyramid: list  # Tensors, coarsest -> finest, px at own scale
    occlusion_logits_pyramid: list
    features_left: list  # Tensors at strides 2, 4, 8
    features_right: list
    strides: tuple

    @property
    def finest_disparity(self):
        return self.disparity_pyramid[-1]

    @property
    def finest_occlusion_logits(self):
        return self.occlusion_logits_pyramid[-1]


def _conv_spec(cfg: ModelConfig):
    """(name, c_in, c_out, k, stride, pad) for every conv; deconvs separate."""
    bc = cfg.base_channels
    redir = max(bc // 2, 2)
    corr_ch = cfg.max_displacement + 1
    enc = [
        ("enc1", 3, bc, 7, 2, 3),
        ("enc2", bc, 2 * bc, 5, 2, 2),
        ("enc3", 2 * bc, 4 * bc, 5, 2, 2),
        ("redir", 4 * bc, redir, 1, 1, 0),
        ("conv3_1", corr_ch + redir, 4 * bc, 3, 1, 1),
        ("conv4", 4 * bc, 8 * bc, 3, 2, 1),
        ("conv4_1", 8 * bc, 8 * bc, 3, 1, 1),
        ("conv5", 8 * bc, 8 * bc, 3, 2, 1),
        ("conv5_1", 8 * bc, 8 * bc, 3, 1, 1),
        ("conv6", 8 * bc, 16 * bc, 3, 2, 1),
        ("conv6_1", 16 * bc, 16 * bc, 3, 1, 1),
    ]
    dec_out = {5: 8 * bc, 4: 4 * bc, 3: 2 * bc, 2: bc, 1: max(bc // 2, 2)}
    skip_ch = {5: 8 * bc, 4: 8 * bc, 3: 4 * bc, 2: 2 * bc, 1: bc}
    dec_in = {5: 16 * bc, 4: 8 * bc, 3: 4 * bc, 2: 2 * bc, 1: bc}
    iconv = [(f"iconv{i}", dec_out[i] + skip_ch[i] + 1, dec_out[i], 3, 1, 1) for i in (5, 4, 3, 2, 1)]
    head_ch = {6: 16 * bc, 5: 8 * bc, 4: 4 * bc, 3: 2 * bc, 2: bc, 1: max(bc // 2, 2)}
    heads = []
    for i in (6, 5, 4, 3, 2, 1):
        heads.append((f"pred_disp{i}", head_ch[i], 1, 3, 1, 1))
        heads.append((f"pred_occ{i}", head_ch[i], 1, 3, 1, 1))
    deconvs = [(f"upconv{i}", dec_in[i], dec_out[i], 4, 2, 1) for i in (5, 4, 3, 2, 1)]
    return enc + iconv + heads, deconvs


def init_params(config: ModelConfig, seed: int) -> dict:
    """Fan-in-scaled normal init, deterministic in (config, seed).

    Disparity head biases start slightly positive so early predictions are
    small positive disparities; occlusion heads start biased toward visible.
    """
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([0x1417, int(seed)]))
    convs, deconvs = _conv_spec(config)
    params: dict = {}
    for name, c_in, c_out, k, _, _ in convs:
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / ((1.0 + LEAK**2) * fan_in))
        if name.startswith("pred_"):
            std = 0.01
        params[f"{name}.w"] = ad.Tensor(
            rng.normal(0.0, std, (c_out, c_in, k, k)).astype(np.float32), requires_grad=True
        )
        bias = np.zeros(c_out, np.float32)
        if name.startswith("pred_disp"):
            bias[:] = 0.5
        elif name.startswith("pred_occ"):
            bias[:] = -2.0
        params[f"{name}.b"] = ad.Tensor(bias, requires_grad=True)
    for name, c_in, c_out, k, _, _ in deconvs:
        fan_in = c_in * k * k
        std = np.sqrt(2.0 / ((1.0 + LEAK**2) * fan_in))
        params[f"{name}.w"] = ad.Tensor(
            rng.normal(0.0, std, (c_in, c_out, k, k)).astype(np.float32), requires_grad=True
        )
        params[f"{name}.b"] = ad.Tensor(np.zeros(c_out, np.float32), requires_grad=True)
    return params


def params_astype(params: dict, dtype) -> dict:
    return {
        k: ad.Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in params.items()
    }


def save_params(params: dict, path):
    serialization.save_arrays(path, {k: v.data for k, v in params.items()}, meta={"kind": "params"})


def load_params(path) -> dict:
    arrays, _ = serialization.load_arrays(path)
    return {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}


def correlate(feat_left: np.ndarray, feat_right: np.ndarray, max_displacement: int) -> np.ndarray:
    """Matching-cost volume for H,W,C feature maps: out(x,y,d) is the
    channel-mean dot product of left(x,y) with right(x-d,y), zero where the
    shifted position leaves the frame."""
    feat_left = np.asarray(feat_left)
    feat_right = np.asarray(feat_right)
    if feat_left.shape != feat_right.shape or feat_left.ndim != 3:
        raise ShapeError(f"feature shapes disagree: {feat_left.shape} vs {feat_right.shape}")
    if max_displacement >= feat_left.shape[1]:
        raise ShapeError("max_displacement must be < feature width")
    l = np.ascontiguousarray(feat_left.transpose(2, 0, 1)[None].astype(np.float64))
    r = np.ascontiguousarray(feat_right.transpose(2, 0, 1)[None].astype(np.float64))
    vol = ad.correlate1d(ad.Tensor(l), ad.Tensor(r), int(max_displacement)).data[0]
    return np.ascontiguousarray(vol.transpose(1, 2, 0)).astype(feat_left.dtype)


def _act(t):
    return ad.leaky_relu(t, LEAK)


def _conv(params, name, x, stride, pad, activate=True):
    out = ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"], stride, pad)
    return _act(out) if activate else out


def _deconv(params, name, x):
    return _act(ad.conv_transpose2d(x, params[f"{name}.w"], params[f"{name}.b"], 2, 1))


def forward(params: dict, left, right, config: ModelConfig) -> NetworkOutput:
    """Run the network. left/right are (N,3,H,W) Tensors or arrays with H and
    W divisible by the coarsest stride; differentiable w.r.t. params and
    inputs."""
    left = left if isinstance(left, ad.Tensor) else ad.Tensor(left)
    right = right if isinstance(right, ad.Tensor) else ad.Tensor(right)
    if left.data.shape != right.data.shape or left.data.ndim != 4 or left.data.shape[1] != 3:
        raise ShapeError(f"expected matching (N,3,H,W) inputs, got {left.data.shape} and {right.data.shape}")
    n, _, h, w = left.data.shape
    div = config.divisor
    if h % div or w % div:
        raise ShapeError(
            f"input {h}x{w} not divisible by {div}; pad to "
            f"{-(-h // div) * div}x{-(-w // div) * div} first"
        )
    d = config.max_displacement
    if d >= w // 8:
        raise ShapeError(
            f"max_displacement={d} must be < correlation-level width {w // 8}"
        )

    # shared-weight towers: the three feature taps, per view
    f1_l = _conv(params, "enc1", left, 2, 3)
    f1_r = _conv(params, "enc1", right, 2, 3)
    f2_l = _conv(params, "enc2", f1_l, 2, 2)
    f2_r = _conv(params, "enc2", f1_r, 2, 2)
    f3_l = _conv(params, "enc3", f2_l, 2, 2)
    f3_r = _conv(params, "enc3", f2_r, 2, 2)

    corr = ad.correlate1d(f3_l, f3_r, d)
    redir = _conv(params, "redir", f3_l, 1, 0)
    x3 = _conv(params, "conv3_1", ad.concat([corr, redir], axis=1), 1, 1)
    x4 = _conv(params, "conv4_1", _conv(params, "conv4", x3, 2, 1), 1, 1)
    x5 = _conv(params, "conv5_1", _conv(params, "conv5", x4, 2, 1), 1, 1)
    x6 = _conv(params, "conv6_1", _conv(params, "conv6", x5, 2, 1), 1, 1)

    def disp_act(t):
        return ad.relu(t) if config.disparity_activation == "relu" else ad.softplus(t)

    disp, occ = [], []
    feat = x6
    d_k = disp_act(_conv(params, "pred_disp6", feat, 1, 1, activate=False))
    disp.append(d_k)
    occ.append(_conv(params, "pred_occ6", feat, 1, 1, activate=False))
    skips = {5: x5, 4: x4, 3: x3, 2: f2_l, 1: f1_l}
    for level in (5, 4, 3, 2, 1):
        up = _deconv(params, f"upconv{level}", feat)
        oh, ow = up.data.shape[2], up.data.shape[3]
        # previous prediction, upsampled and converted to this scale's pixels
        d_up = ad.resize_bilinear(d_k, oh, ow) * 2.0
        feat = _conv(params, f"iconv{level}", ad.concat([up, skips[level], d_up], axis=1), 1, 1)
        d_k = disp_act(_conv(params, f"pred_disp{level}", feat, 1, 1, activate=False))
        disp.append(d_k)
        occ.append(_conv(params, f"pred_occ{level}", feat, 1, 1, activate=False))

    keep = config.n_scales
    return NetworkOutput(
        disparity_pyramid=[t_squeeze(t) for t in disp[-keep:]],
        occlusion_logits_pyramid=[t_squeeze(t) for t in occ[-keep:]],
        features_left=[f1_l, f2_l, f3_l],
        features_right=[f1_r, f2_r, f3_r],
        strides=config.strides,
    )


def t_squeeze(t: ad.Tensor) -> ad.Tensor:
    """Drop the singleton channel axis of a (N,1,H,W) head output."""
    n, _, h, w = t.data.shape
    return ad.reshape(t, (n, h, w))


def upsample_to_full(disparity, target_h: int, target_w: int):
    """Bilinear upsample of a disparity map with values rescaled by the width
    ratio so units stay in pixels. Accepts (...,H,W) Tensor or array."""
    t = disparity if isinstance(disparity, ad.Tensor) else ad.Tensor(disparity)
    h, w = t.data.shape[-2], t.data.shape[-1]
    if target_h % h or target_w % w or target_h // h != target_w // w:
        raise ShapeError(
            f"target {target_h}x{target_w} is not an integer multiple of source {h}x{w}"
        )
    ratio = target_w / w
    out = t if ratio == 1.0 else ad.resize_bilinear(t, target_h, target_w) * float(ratio)
    return out if isinstance(disparity, ad.Tensor) else out.data
