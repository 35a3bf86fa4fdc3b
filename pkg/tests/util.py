"""Shared test helpers: finite differences and tiny builders."""

import numpy as np

from semistereo import autodiff as ad


def numeric_grad(fn, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of scalar fn() w.r.t. the aliased array x."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1e-6, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def gradcheck(make_loss, x: np.ndarray, h: float = 1e-6, tol: float = 1e-4) -> float:
    """make_loss maps a Tensor to a scalar Tensor; x must be float64."""
    assert x.dtype == np.float64
    t = ad.Tensor(x, requires_grad=True)
    make_loss(t).backward()
    num = numeric_grad(lambda: float(make_loss(ad.Tensor(x)).data), x, h)
    err = rel_err(t.grad, num)
    assert err < tol, f"gradient mismatch: rel err {err:.3e} >= {tol}"
    return err


def fd_param_check(loss_value, tensor, idx, analytic, rtol=1e-4, atol=1e-7):
    """Central-difference check of one parameter scalar against `analytic`.

    Gradients below `atol` sit under the cancellation floor of double-
    precision central differences on an O(1) loss and cannot be resolved;
    they pass vacuously. Returns the relative error (0.0 when floored).
    """
    flat = tensor.data.reshape(-1)
    old = flat[idx]
    h = 1e-5 * max(1.0, abs(old))
    flat[idx] = old + h
    fp = loss_value()
    flat[idx] = old - h
    fm = loss_value()
    flat[idx] = old
    num = (fp - fm) / (2.0 * h)
    m = max(abs(analytic), abs(num))
    if m < atol:
        return 0.0
    err = abs(analytic - num) / m
    assert err < rtol, f"param[{idx}]: analytic {analytic:.6e}, numeric {num:.6e}, rel {err:.3e}"
    return err
