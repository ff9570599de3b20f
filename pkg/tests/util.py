"""Shared helpers: central finite-difference gradient oracle."""

import numpy as np

from invpaint import tensor as T


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f at x (64-bit)."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grad(loss_fn, x0: np.ndarray, rel_tol: float = 1e-4, h: float = 1e-5):
    """Compare reverse-mode gradient against the finite-difference oracle.

    ``loss_fn`` maps a Tensor to a scalar Tensor and must be pure.
    """
    p = T.param(x0.astype(np.float64))
    loss = loss_fn(p)
    T.clear_grads([p])
    T.backward(loss)
    ana = p.grad

    def f(arr):
        return loss_fn(T.Tensor(arr)).item()

    num = finite_diff_grad(f, x0.astype(np.float64), h=h)
    denom = np.maximum(np.abs(num), 1e-6)
    rel = np.abs(ana - num) / denom
    assert rel.max() < rel_tol, f"max rel grad error {rel.max():g}"
    return rel.max()
