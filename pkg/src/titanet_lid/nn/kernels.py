"""Hot-loop kernels with a compiled backend and a numpy fallback.

The compiled extension is used when it imports; setting
``TITANET_LID_PURE_PYTHON=1`` forces the numpy path. Both backends share
one contract per kernel and are cross-checked in the test suite.
"""
import os

import numpy as np


def _valid(x, lengths):
    return (np.arange(x.shape[2])[None, :] < lengths[:, None])[:, None, :]


def dwconv_forward_numpy(x, w):
    n_t = x.shape[2]
    K = w.shape[1]
    pad = (K - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    out = np.zeros_like(x)
    for k in range(K):
        out += xp[:, :, k:k + n_t] * w[None, :, k, None]
    return out


def dwconv_backward_numpy(g, x, w):
    n_t = x.shape[2]
    K = w.shape[1]
    pad = (K - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad)))
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for k in range(K):
        gw[:, k] = np.einsum("nct,nct->c", g, xp[:, :, k:k + n_t])
        gxp[:, :, k:k + n_t] += g * w[None, :, k, None]
    return gxp[:, :, pad:pad + n_t], gw


def bn_stats_numpy(x, lengths):
    count = float(lengths.sum())
    if count == 0:
        return np.zeros(x.shape[1]), np.zeros(x.shape[1]), 0.0
    m = _valid(x, lengths)
    mean = np.where(m, x, 0.0).sum(axis=(0, 2)) / count
    d = np.where(m, x - mean[None, :, None], 0.0)
    return mean, np.einsum("nct,nct->c", d, d) / count, count


def affine_act_forward_numpy(x, scale, shift, relu):
    y = x * scale[None, :, None] + shift[None, :, None]
    return np.maximum(y, 0.0) if relu else y


def bn_backward_numpy(g, x, scale, shift, mean, inv_std, lengths, relu, training):
    if relu:
        g = np.where(x * scale[None, :, None] + shift[None, :, None] > 0.0, g, 0.0)
    xhat = (x - mean[None, :, None]) * inv_std[None, :, None]
    sg = g.sum(axis=(0, 2))
    sgx = np.einsum("nct,nct->c", g, xhat)
    if training:
        count = float(lengths.sum())
        corr = (sg[None, :, None] + xhat * sgx[None, :, None]) / count
        gx = (g - _valid(x, lengths) * corr) * scale[None, :, None]
    else:
        gx = g * scale[None, :, None]
    return gx, sgx, sg


def stats_pool_forward_numpy(x, lengths, floor):
    m = _valid(x, lengths)
    L = lengths[:, None].astype(np.float64)
    mu = np.where(m, x, 0.0).sum(axis=2) / L
    d = np.where(m, x - mu[:, :, None], 0.0)
    var = (d * d).sum(axis=2) / L
    floored = var <= floor
    std = np.sqrt(np.where(floored, floor, var))
    return np.concatenate([mu, std], axis=1), floored.astype(np.uint8)


def stats_pool_backward_numpy(g, x, pooled, floored, lengths):
    n_ch = x.shape[1]
    m = _valid(x, lengths)
    L = lengths[:, None].astype(np.float64)
    mu, std = pooled[:, :n_ch], pooled[:, n_ch:]
    coef = np.where(floored.astype(bool), 0.0, g[:, n_ch:] / (L * std))
    gx = (g[:, :n_ch] / L)[:, :, None] + coef[:, :, None] * (x - mu[:, :, None])
    return np.where(m, gx, 0.0)


def bn_relu_pool_forward_numpy(x, scale, shift, lengths, floor):
    h = affine_act_forward_numpy(x, scale, shift, True)
    return stats_pool_forward_numpy(h, lengths, floor)


def bn_relu_pool_backward_numpy(g, x, scale, shift, mean, inv_std, pooled, floored, lengths, training):
    h = affine_act_forward_numpy(x, scale, shift, True)
    gh = stats_pool_backward_numpy(g, h, pooled, floored, lengths)
    return bn_backward_numpy(gh, x, scale, shift, mean, inv_std, lengths, True, training)


_NAMES = ("dwconv_forward", "dwconv_backward", "bn_stats", "affine_act_forward",
          "bn_backward", "stats_pool_forward", "stats_pool_backward",
          "bn_relu_pool_forward", "bn_relu_pool_backward")
_FALLBACK = {name: globals()[f"{name}_numpy"] for name in _NAMES}

try:
    if os.environ.get("TITANET_LID_PURE_PYTHON") == "1":
        raise ImportError("pure-python mode requested")
    from titanet_lid.nn import _kernels as _compiled
except ImportError:
    _compiled = None

BACKEND = "compiled" if _compiled is not None else "numpy"


def compiled_available():
    return _compiled is not None


def get_backend(name=None):
    """Kernel table for ``name`` ("compiled", "numpy", or None for the active backend)."""
    name = name or BACKEND
    if name == "numpy":
        return _FALLBACK
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return {n: getattr(_compiled, n) for n in _NAMES}
    raise ValueError(f"unknown kernel backend {name!r}")


_active = get_backend()


def set_backend(name):
    """Switch the backend used by the tensor ops (benchmarks and cross-checks)."""
    global BACKEND, _active
    _active = get_backend(name)
    BACKEND = name


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _lengths(lengths):
    return np.ascontiguousarray(lengths, dtype=np.int64)


def dwconv_forward(x, w):
    return _active["dwconv_forward"](_c(x), _c(w))


def dwconv_backward(g, x, w):
    return _active["dwconv_backward"](_c(g), _c(x), _c(w))


def bn_stats(x, lengths):
    return _active["bn_stats"](_c(x), _lengths(lengths))


def affine_act_forward(x, scale, shift, relu):
    return _active["affine_act_forward"](_c(x), _c(scale), _c(shift), bool(relu))


def bn_backward(g, x, scale, shift, mean, inv_std, lengths, relu, training):
    return _active["bn_backward"](_c(g), _c(x), _c(scale), _c(shift), _c(mean), _c(inv_std),
                                  _lengths(lengths), bool(relu), bool(training))


def stats_pool_forward(x, lengths, floor):
    out, floored = _active["stats_pool_forward"](_c(x), _lengths(lengths), float(floor))
    return out, np.asarray(floored, dtype=np.uint8)


def stats_pool_backward(g, x, pooled, floored, lengths):
    return _active["stats_pool_backward"](_c(g), _c(x), _c(pooled),
                                          np.ascontiguousarray(floored, dtype=np.uint8),
                                          _lengths(lengths))


def bn_relu_pool_forward(x, scale, shift, lengths, floor):
    out, floored = _active["bn_relu_pool_forward"](_c(x), _c(scale), _c(shift), _lengths(lengths),
                                                   float(floor))
    return out, np.asarray(floored, dtype=np.uint8)


def bn_relu_pool_backward(g, x, scale, shift, mean, inv_std, pooled, floored, lengths, training):
    return _active["bn_relu_pool_backward"](
        _c(g), _c(x), _c(scale), _c(shift), _c(mean), _c(inv_std), _c(pooled),
        np.ascontiguousarray(floored, dtype=np.uint8), _lengths(lengths), bool(training))
