"""5x5 same-padding convolution kernels, the hot loops of the detector.

Two interchangeable backends:
  numba  - compiled direct convolution (default when numba imports)
  numpy  - im2col + BLAS matmul fallback

Selection: env var SHAPE_EVADE_BACKEND=numba|numpy, else auto. Both accumulate
in float64. The backends are numerically equivalent to reduction-order rounding
(see benchmarks/bench_kernels.py); within one backend results are bit-stable.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL_SIZE = 5
PAD = KERNEL_SIZE // 2


def _pad(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (PAD, PAD), (PAD, PAD)))


# --------------------------------------------------------------------------
# numpy backend: im2col + matmul


def _im2col(x: np.ndarray) -> np.ndarray:
    """(C, H, W) -> (H*W, C*K*K) patch matrix."""
    c, h, w = x.shape
    win = sliding_window_view(_pad(x), (KERNEL_SIZE, KERNEL_SIZE), axis=(1, 2))
    return np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(h * w, -1)


def _conv_forward_np(x, w, b):
    co, h, wd = w.shape[0], x.shape[1], x.shape[2]
    out = _im2col(x) @ w.reshape(co, -1).T + b
    return np.ascontiguousarray(out.T.reshape(co, h, wd))


def _conv_input_grad_np(gy, w):
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return _conv_forward_np(gy, wt, np.zeros(wt.shape[0]))


def _conv_weight_grad_np(x, gy):
    co, h, wd = gy.shape
    gy_flat = gy.reshape(co, -1)
    gw = (gy_flat @ _im2col(x)).reshape(co, x.shape[0], KERNEL_SIZE, KERNEL_SIZE)
    return gw, gy_flat.sum(axis=1)


# --------------------------------------------------------------------------
# numba backend: direct convolution on pre-padded input

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True)
    def _conv_forward_nb_core(xp, w, b):
        # taps hoisted so the inner x loop is a contiguous fused multiply-add
        ci, co = w.shape[1], w.shape[0]
        h = xp.shape[1] - 2 * PAD
        wd = xp.shape[2] - 2 * PAD
        out = np.empty((co, h, wd))
        for o in range(co):
            for y in range(h):
                row = out[o, y]
                for x in range(wd):
                    row[x] = b[o]
                for c in range(ci):
                    for ky in range(KERNEL_SIZE):
                        src = xp[c, y + ky]
                        for kx in range(KERNEL_SIZE):
                            wv = w[o, c, ky, kx]
                            for x in range(wd):
                                row[x] += wv * src[x + kx]
        return out

    @njit(cache=True)
    def _conv_weight_grad_nb_core(xp, gy):
        ci = xp.shape[0]
        co, h, wd = gy.shape
        gw = np.zeros((co, ci, KERNEL_SIZE, KERNEL_SIZE))
        gb = np.zeros(co)
        for o in range(co):
            acc_b = 0.0
            for y in range(h):
                grow = gy[o, y]
                for x in range(wd):
                    acc_b += grow[x]
                for c in range(ci):
                    for ky in range(KERNEL_SIZE):
                        src = xp[c, y + ky]
                        for kx in range(KERNEL_SIZE):
                            acc = 0.0
                            for x in range(wd):
                                acc += grow[x] * src[x + kx]
                            gw[o, c, ky, kx] += acc
            gb[o] = acc_b
        return gw, gb

    def _conv_forward_nb(x, w, b):
        return _conv_forward_nb_core(_pad(x), w, b)

    def _conv_input_grad_nb(gy, w):
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        return _conv_forward_nb_core(_pad(gy), wt, np.zeros(wt.shape[0]))

    def _conv_weight_grad_nb(x, gy):
        return _conv_weight_grad_nb_core(_pad(x), np.ascontiguousarray(gy))


_BACKENDS = {"numpy": (_conv_forward_np, _conv_input_grad_np, _conv_weight_grad_np)}
if _HAVE_NUMBA:
    _BACKENDS["numba"] = (_conv_forward_nb, _conv_input_grad_nb, _conv_weight_grad_nb)


def _pick_default() -> str:
    requested = os.environ.get("SHAPE_EVADE_BACKEND", "").strip().lower()
    if requested:
        if requested not in ("numba", "numpy"):
            raise ValueError(
                f"SHAPE_EVADE_BACKEND must be 'numba' or 'numpy', got {requested!r}"
            )
        if requested == "numba" and not _HAVE_NUMBA:
            raise ValueError("SHAPE_EVADE_BACKEND=numba but numba is not importable")
        return requested
    return "numba" if _HAVE_NUMBA else "numpy"


_ACTIVE = _pick_default()


def backend_name() -> str:
    """Name of the active kernel backend."""
    return _ACTIVE


def set_backend(name: str):
    """Switch kernel backend at runtime (mainly for tests and benchmarks)."""
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; have {sorted(_BACKENDS)}")
    global _ACTIVE
    _ACTIVE = name


def _as_f64(a):
    return np.ascontiguousarray(np.asarray(a, dtype=np.float64))


def conv_forward(x, w, b) -> np.ndarray:
    """Same-padding 5x5 convolution: (C,H,W) x (O,C,5,5) + (O,) -> (O,H,W)."""
    return _BACKENDS[_ACTIVE][0](_as_f64(x), _as_f64(w), _as_f64(b))


def conv_input_grad(gy, w) -> np.ndarray:
    """Gradient w.r.t. the convolution input: (O,H,W) x (O,C,5,5) -> (C,H,W)."""
    return _BACKENDS[_ACTIVE][1](_as_f64(gy), _as_f64(w))


def conv_weight_grad(x, gy):
    """Gradients w.r.t. weights and bias: returns ((O,C,5,5), (O,))."""
    return _BACKENDS[_ACTIVE][2](_as_f64(x), _as_f64(gy))
