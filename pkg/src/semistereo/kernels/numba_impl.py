"""Numba @njit kernels for the gather/scatter-bound inner loops: 1-D
correlation and horizontal warping, where explicit loops beat vectorized
numpy by 5-7x (measured in benchmarks/bench_kernels.py).

Convolution is deliberately NOT reimplemented here: it is matmul-bound and the
im2col + BLAS path in numpy_impl beats scalar loops by an order of magnitude,
so both backends share it. Serial loops, no fastmath: results must be
bit-reproducible run to run. cache=True so the suite pays compilation once
per dtype.
"""

import numpy as np
from numba import njit

from .numpy_impl import conv2d_bwd_input, conv2d_bwd_weight, conv2d_forward  # noqa: F401


@njit(cache=True)
def corr1d_forward(left, right, max_disp):
    n, c, h, w = left.shape
    y = np.zeros((n, max_disp + 1, h, w), dtype=left.dtype)
    inv_c = 1.0 / c
    for ni in range(n):
        for d in range(max_disp + 1):
            for yi in range(h):
                for xi in range(d, w):
                    acc = 0.0
                    for ci in range(c):
                        acc += left[ni, ci, yi, xi] * right[ni, ci, yi, xi - d]
                    y[ni, d, yi, xi] = acc * inv_c
    return y


@njit(cache=True)
def corr1d_backward(left, right, gy):
    n, c, h, w = left.shape
    max_disp = gy.shape[1] - 1
    gl = np.zeros_like(left)
    gr = np.zeros_like(right)
    inv_c = 1.0 / c
    for ni in range(n):
        for d in range(max_disp + 1):
            for yi in range(h):
                for xi in range(d, w):
                    g = gy[ni, d, yi, xi] * inv_c
                    for ci in range(c):
                        gl[ni, ci, yi, xi] += g * right[ni, ci, yi, xi - d]
                        gr[ni, ci, yi, xi - d] += g * left[ni, ci, yi, xi]
    return gl, gr


@njit(cache=True)
def warp1d_forward(src, disp):
    n, c, h, w = src.shape
    out = np.zeros_like(src)
    inb = np.zeros((n, h, w), dtype=np.bool_)
    for ni in range(n):
        for yi in range(h):
            for xi in range(w):
                u = xi - disp[ni, yi, xi]
                if u < 0 or u > w - 1:
                    continue
                inb[ni, yi, xi] = True
                x0 = int(np.floor(u))
                x1 = min(x0 + 1, w - 1)
                f = u - x0
                for ci in range(c):
                    out[ni, ci, yi, xi] = (1.0 - f) * src[ni, ci, yi, x0] + f * src[ni, ci, yi, x1]
    return out, inb


@njit(cache=True)
def warp1d_backward(src, disp, gy):
    n, c, h, w = src.shape
    gsrc = np.zeros_like(src)
    gdisp = np.zeros_like(disp)
    for ni in range(n):
        for yi in range(h):
            for xi in range(w):
                u = xi - disp[ni, yi, xi]
                if u < 0 or u > w - 1:
                    continue
                x0 = int(np.floor(u))
                x1 = min(x0 + 1, w - 1)
                f = u - x0
                acc = 0.0
                for ci in range(c):
                    g = gy[ni, ci, yi, xi]
                    gsrc[ni, ci, yi, x0] += (1.0 - f) * g
                    gsrc[ni, ci, yi, x1] += f * g
                    acc += (src[ni, ci, yi, x0] - src[ni, ci, yi, x1]) * g
                gdisp[ni, yi, xi] = acc
    return gsrc, gdisp
