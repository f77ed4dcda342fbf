"""Depthwise convolution kernels.

Two interchangeable backends compute the same zero-padded "same" stride-1
cross-correlation:

* ``numba``: explicit loop nests compiled with ``@njit``, parallel over
  (sample, channel) planes. Each plane is written by exactly one iteration,
  so results do not depend on the thread count.
* ``numpy``: k*k shifted-slice accumulations on a padded copy.

The backend is picked at import from ``C2F_NUMBA`` (``0`` disables numba)
and can be switched at runtime with :func:`set_backend`. ``C2F_THREADS``
caps numba's worker count (``0`` = numba default).
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
    # skip the TBB probe; old system TBB builds only produce a warning
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_backend = "numba" if HAVE_NUMBA and os.environ.get("C2F_NUMBA", "1") != "0" else "numpy"


def _apply_thread_cap() -> None:
    if not HAVE_NUMBA:
        return
    raw = os.environ.get("C2F_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n > 0:
        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


_apply_thread_cap()


def backend() -> str:
    return _backend


def set_backend(name: str) -> str:
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    prev, _backend = _backend, name
    return prev


# ---------------------------------------------------------------- numpy path


def _dw_forward_np(x, w):
    n, c, h, wd = x.shape
    k = w.shape[-1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros_like(x)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i : i + h, j : j + wd] * w[None, :, i, j, None, None]
    return out


def _dw_grad_input_np(g, w):
    n, c, h, wd = g.shape
    k = w.shape[-1]
    p = k // 2
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p), dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + h, j : j + wd] += g * w[None, :, i, j, None, None]
    return dxp[:, :, p : p + h, p : p + wd].copy()


def _dw_grad_kernel_np(x, g, k):
    n, c, h, wd = x.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    dw = np.empty((c, k, k), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            dw[:, i, j] = np.einsum("nchw,nchw->c", g, xp[:, :, i : i + h, j : j + wd])
    return dw


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    # Tap offsets are the outer loops and the valid output window for each tap
    # is computed once, so the innermost loop runs branch-free over a
    # contiguous row and vectorises.

    @njit(parallel=True, cache=True, fastmath=True)
    def _dw_forward_nb(x, w):
        n, c, h, wd = x.shape
        k = w.shape[1]
        p = k // 2
        out = np.zeros_like(x)
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            xs = x[b, ch]
            os_ = out[b, ch]
            for i in range(k):
                y0, y1 = max(0, p - i), min(h, h + p - i)
                for j in range(k):
                    x0, x1 = max(0, p - j), min(wd, wd + p - j)
                    wv = w[ch, i, j]
                    for oy in range(y0, y1):
                        iy = oy + i - p
                        for ox in range(x0, x1):
                            os_[oy, ox] += wv * xs[iy, ox + j - p]
        return out

    @njit(parallel=True, cache=True, fastmath=True)
    def _dw_grad_input_nb(g, w):
        n, c, h, wd = g.shape
        k = w.shape[1]
        p = k // 2
        dx = np.zeros_like(g)
        for nc in prange(n * c):
            b = nc // c
            ch = nc % c
            gs = g[b, ch]
            ds = dx[b, ch]
            for i in range(k):
                y0, y1 = max(0, p - i), min(h, h + p - i)
                for j in range(k):
                    x0, x1 = max(0, p - j), min(wd, wd + p - j)
                    wv = w[ch, i, j]
                    for oy in range(y0, y1):
                        iy = oy + i - p
                        for ox in range(x0, x1):
                            ds[iy, ox + j - p] += wv * gs[oy, ox]
        return dx

    @njit(parallel=True, cache=True, fastmath=True)
    def _dw_grad_kernel_nb(x, g, k):
        n, c, h, wd = x.shape
        p = k // 2
        dw = np.zeros((c, k, k), dtype=x.dtype)
        for ch in prange(c):
            acc = np.zeros((k, k))
            for b in range(n):
                for oy in range(h):
                    grow = g[b, ch, oy]
                    for i in range(k):
                        iy = oy + i - p
                        if iy < 0 or iy >= h:
                            continue
                        xrow = x[b, ch, iy]
                        for j in range(k):
                            x0, x1 = max(0, p - j), min(wd, wd + p - j)
                            if x0 >= x1:
                                continue
                            # row sum in the input dtype keeps the loop SIMD-width
                            s = grow[x0] * xrow[x0 + j - p]
                            for ox in range(x0 + 1, x1):
                                s += grow[ox] * xrow[ox + j - p]
                            acc[i, j] += s
            for i in range(k):
                for j in range(k):
                    dw[ch, i, j] = acc[i, j]
        return dw


# ---------------------------------------------------------------- dispatch


def dw_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Depthwise cross-correlation without bias. x: NCHW, w: C*k*k."""
    if _backend == "numba":
        return _dw_forward_nb(np.ascontiguousarray(x), np.ascontiguousarray(w))
    return _dw_forward_np(x, w)


def dw_grad_input(g: np.ndarray, w: np.ndarray) -> np.ndarray:
    if _backend == "numba":
        return _dw_grad_input_nb(np.ascontiguousarray(g), np.ascontiguousarray(w))
    return _dw_grad_input_np(g, w)


def dw_grad_kernel(x: np.ndarray, g: np.ndarray, k: int) -> np.ndarray:
    # Both backends use the einsum path: it reduces through BLAS and beat the
    # numba loop on every stage shape measured (benchmarks/bench_kernels.py).
    return _dw_grad_kernel_np(x, g, k)
