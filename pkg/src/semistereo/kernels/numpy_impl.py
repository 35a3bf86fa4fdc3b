"""Pure-numpy kernel fallbacks.

Vectorized with im2col / shifted-slice tricks; semantics are defined by these
implementations and the numba versions must agree with them (and both with the
brute-force oracles in the tests) to ~1e-6.
All arrays are NCHW, C-contiguous. `disp` maps are N,H,W.
"""

import numpy as np


def _out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d_forward(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = _out_size(h, kh, stride, pad), _out_size(wd, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw),
        writeable=False,
    )
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * kh * kw)
    y = cols @ w.reshape(o, -1).T
    y += b
    return np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2))


def conv2d_bwd_input(gy, w, stride, pad, h, wd):
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            # contribution of tap (i,j): gxp[.., i + s*oh, j + s*ow] += sum_o gy * w[o,:,i,j]
            g = np.tensordot(gy, w[:, :, i, j], axes=([1], [0]))  # n,ho,wo,c
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g.transpose(0, 3, 1, 2)
    if pad:
        return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd])
    return gxp


def conv2d_bwd_weight(x, gy, stride, pad, kh, kw):
    n, c, h, wd = x.shape
    _, o, ho, wo = gy.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    gw = np.zeros((o, c, kh, kw), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            gw[:, :, i, j] = np.tensordot(gy, xs, axes=([0, 2, 3], [0, 2, 3]))
    gb = gy.sum(axis=(0, 2, 3))
    return gw, gb


def corr1d_forward(left, right, max_disp):
    n, c, h, w = left.shape
    y = np.zeros((n, max_disp + 1, h, w), dtype=left.dtype)
    inv_c = 1.0 / c
    for d in range(max_disp + 1):
        if d < w:
            y[:, d, :, d:] = (left[:, :, :, d:] * right[:, :, :, : w - d]).sum(axis=1) * inv_c
    return y


def corr1d_backward(left, right, gy):
    n, c, h, w = left.shape
    max_disp = gy.shape[1] - 1
    gl = np.zeros_like(left)
    gr = np.zeros_like(right)
    inv_c = 1.0 / c
    for d in range(max_disp + 1):
        if d >= w:
            continue
        g = gy[:, d : d + 1, :, d:] * inv_c
        gl[:, :, :, d:] += g * right[:, :, :, : w - d]
        gr[:, :, :, : w - d] += g * left[:, :, :, d:]
    return gl, gr


def warp1d_forward(src, disp):
    n, c, h, w = src.shape
    u = np.arange(w, dtype=disp.dtype) - disp  # n,h,w sample x-coordinate
    inb = (u >= 0) & (u <= w - 1)
    uc = np.clip(u, 0, w - 1)
    x0 = np.floor(uc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    f = (uc - x0).astype(src.dtype)
    idx0 = x0[:, None, :, :]
    idx1 = x1[:, None, :, :]
    s0 = np.take_along_axis(src, np.broadcast_to(idx0, src.shape), axis=3)
    s1 = np.take_along_axis(src, np.broadcast_to(idx1, src.shape), axis=3)
    out = (1 - f[:, None]) * s0 + f[:, None] * s1
    out *= inb[:, None]
    return out, inb


def warp1d_backward(src, disp, gy):
    n, c, h, w = src.shape
    u = np.arange(w, dtype=disp.dtype) - disp
    inb = (u >= 0) & (u <= w - 1)
    uc = np.clip(u, 0, w - 1)
    x0 = np.floor(uc).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    f = (uc - x0).astype(src.dtype)
    g = gy * inb[:, None]
    idx0 = np.broadcast_to(x0[:, None, :, :], src.shape)
    idx1 = np.broadcast_to(x1[:, None, :, :], src.shape)
    gsrc = np.zeros_like(src)
    # scatter bilinear weights back to the two source columns
    ncy = np.indices((n, c, h, w))
    np.add.at(gsrc, (ncy[0], ncy[1], ncy[2], idx0), (1 - f[:, None]) * g)
    np.add.at(gsrc, (ncy[0], ncy[1], ncy[2], idx1), f[:, None] * g)
    s0 = np.take_along_axis(src, idx0, axis=3)
    s1 = np.take_along_axis(src, idx1, axis=3)
    gdisp = ((s0 - s1) * g).sum(axis=1)  # d out / d disp = -(s1 - s0)
    gdisp *= inb
    return gsrc, gdisp.astype(disp.dtype)
