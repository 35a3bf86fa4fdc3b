"""Dispatch to the active kernel backend (numba @njit loops or pure numpy).

Call sites use these wrappers; the choice is made per call so tests and the
benchmark can flip backends with `backend.set_backend`.
"""

import numpy as np

from .. import backend
from . import numpy_impl

_IMPLS = {"numpy": numpy_impl}

if backend.HAS_NUMBA:
    from . import numba_impl

    _IMPLS["numba"] = numba_impl


def _impl():
    return _IMPLS[backend.active_backend()]


def conv2d_forward(x, w, b, stride, pad):
    return _impl().conv2d_forward(x, w, b, stride, pad)


def conv2d_bwd_input(gy, w, stride, pad, h, wd):
    return _impl().conv2d_bwd_input(gy, w, stride, pad, h, wd)


def conv2d_bwd_weight(x, gy, stride, pad, kh, kw):
    return _impl().conv2d_bwd_weight(x, gy, stride, pad, kh, kw)


def corr1d_forward(left, right, max_disp):
    return _impl().corr1d_forward(left, right, max_disp)


def corr1d_backward(left, right, gy):
    return _impl().corr1d_backward(left, right, gy)


def warp1d_forward(src, disp):
    out, inb = _impl().warp1d_forward(src, np.ascontiguousarray(disp))
    return out, inb


def warp1d_backward(src, disp, gy):
    return _impl().warp1d_backward(src, np.ascontiguousarray(disp), np.ascontiguousarray(gy))
