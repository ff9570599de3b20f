"""Convolution kernels: numba-jitted hot path with a pure-numpy fallback.

Backend selection via the ``INVPAINT_BACKEND`` environment variable:
``numba``, ``numpy``, or ``auto`` (default: numba when importable).
Both backends compute identical values up to float summation order; each
backend is individually deterministic.

All kernels take pre-padded inputs; padding/cropping lives in the caller
(:mod:`invpaint.tensor`).
"""

from __future__ import annotations

import os

import numpy as np

# ---------------------------------------------------------------- numpy path


def conv2d_fwd_numpy(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """xp: (N,C,Hp,Wp) pre-padded, w: (O,C,kh,kw) -> (N,O,Ho,Wo)."""
    n, c, hp, wp = xp.shape
    o, _, kh, kw = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    y = np.zeros((n, o, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            sub = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            y += np.einsum("nchw,oc->nohw", sub, w[:, :, i, j], optimize=True)
    return y


def conv2d_bwd_input_numpy(
    gy: np.ndarray, w: np.ndarray, stride: int, hp: int, wp: int
) -> np.ndarray:
    """Gradient w.r.t. the padded input."""
    n, o, ho, wo = gy.shape
    _, c, kh, kw = w.shape
    gxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                np.einsum("nohw,oc->nchw", gy, w[:, :, i, j], optimize=True)
            )
    return gxp


def conv2d_bwd_weight_numpy(
    xp: np.ndarray, gy: np.ndarray, stride: int, kh: int, kw: int
) -> np.ndarray:
    n, o, ho, wo = gy.shape
    c = xp.shape[1]
    gw = np.zeros((o, c, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            sub = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            gw[:, :, i, j] = np.einsum("nohw,nchw->oc", gy, sub, optimize=True)
    return gw


# ---------------------------------------------------------------- numba path

try:  # pragma: no cover - exercised indirectly via backend selection
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @numba.njit(cache=True, fastmath=False)
    def _conv2d_fwd_nb(xp, w, stride):
        n, c, hp, wp = xp.shape
        o, _, kh, kw = w.shape
        ho = (hp - kh) // stride + 1
        wo = (wp - kw) // stride + 1
        y = np.zeros((n, o, ho * wo), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                wij = np.ascontiguousarray(w[:, :, i, j])
                for b in range(n):
                    sub = np.ascontiguousarray(
                        xp[b, :, i : i + stride * ho : stride,
                           j : j + stride * wo : stride]
                    ).reshape(c, ho * wo)
                    y[b] += np.dot(wij, sub)
        return y.reshape(n, o, ho, wo)

    @numba.njit(cache=True, fastmath=False)
    def _conv2d_bwd_input_nb(gy, w, stride, hp, wp):
        n, o, ho, wo = gy.shape
        _, c, kh, kw = w.shape
        gxp = np.zeros((n, c, hp, wp), dtype=gy.dtype)
        for i in range(kh):
            for j in range(kw):
                wij_t = np.ascontiguousarray(w[:, :, i, j]).T.copy()
                for b in range(n):
                    g2 = np.ascontiguousarray(gy[b]).reshape(o, ho * wo)
                    gxp[b, :, i : i + stride * ho : stride,
                        j : j + stride * wo : stride] += np.dot(
                        wij_t, g2
                    ).reshape(c, ho, wo)
        return gxp

    @numba.njit(cache=True, fastmath=False)
    def _conv2d_bwd_weight_nb(xp, gy, stride, kh, kw):
        n, o, ho, wo = gy.shape
        c = xp.shape[1]
        gw = np.zeros((o, c, kh, kw), dtype=xp.dtype)
        for i in range(kh):
            for j in range(kw):
                acc = np.zeros((o, c), dtype=xp.dtype)
                for b in range(n):
                    sub = np.ascontiguousarray(
                        xp[b, :, i : i + stride * ho : stride,
                           j : j + stride * wo : stride]
                    ).reshape(c, ho * wo)
                    g2 = np.ascontiguousarray(gy[b]).reshape(o, ho * wo)
                    acc += np.dot(g2, sub.T)
                gw[:, :, i, j] = acc
        return gw

    def _pair(a, b):
        # np.dot inside the jitted kernels needs matching dtypes
        dt = np.result_type(a.dtype, b.dtype)
        return (np.ascontiguousarray(a, dtype=dt),
                np.ascontiguousarray(b, dtype=dt))

    def conv2d_fwd_numba(xp, w, stride):
        xp, w = _pair(xp, w)
        return _conv2d_fwd_nb(xp, w, stride)

    def conv2d_bwd_input_numba(gy, w, stride, hp, wp):
        gy, w = _pair(gy, w)
        return _conv2d_bwd_input_nb(gy, w, stride, hp, wp)

    def conv2d_bwd_weight_numba(xp, gy, stride, kh, kw):
        xp, gy = _pair(xp, gy)
        return _conv2d_bwd_weight_nb(xp, gy, stride, kh, kw)


_BACKENDS = {
    "numpy": (conv2d_fwd_numpy, conv2d_bwd_input_numpy, conv2d_bwd_weight_numpy),
}
if _HAVE_NUMBA:
    _BACKENDS["numba"] = (
        conv2d_fwd_numba,
        conv2d_bwd_input_numba,
        conv2d_bwd_weight_numba,
    )

_active: str | None = None


def backend_name() -> str:
    """Resolve the active backend, honoring INVPAINT_BACKEND."""
    global _active
    if _active is None:
        want = os.environ.get("INVPAINT_BACKEND", "auto").lower()
        if want == "auto":
            _active = "numba" if _HAVE_NUMBA else "numpy"
        elif want in _BACKENDS:
            _active = want
        elif want == "numba":
            raise RuntimeError("INVPAINT_BACKEND=numba but numba is not importable")
        else:
            raise RuntimeError(f"unknown INVPAINT_BACKEND value: {want!r}")
    return _active


def set_backend(name: str | None) -> None:
    """Force a backend ('numba'/'numpy'), or None to re-resolve from env."""
    global _active
    if name is not None and name not in _BACKENDS:
        raise RuntimeError(f"backend {name!r} unavailable; have {sorted(_BACKENDS)}")
    _active = name


def kernels():
    """(fwd, bwd_input, bwd_weight) for the active backend."""
    return _BACKENDS[backend_name()]
