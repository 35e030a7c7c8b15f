"""Compiled kernels against the numpy fallback, and backend selection."""
import os
import subprocess
import sys

import numpy as np
import pytest

from titanet_lid.nn import kernels

needs_compiled = pytest.mark.skipif(not kernels.compiled_available(), reason="extension not built")


def _case(seed):
    rng = np.random.default_rng(seed)
    n, c, t = int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(2, 20))
    lengths = rng.integers(1, t + 1, size=n).astype(np.int64)
    lengths[0] = t
    return rng, rng.normal(size=(n, c, t)), lengths


def _both(name, *args):
    return kernels.get_backend("compiled")[name](*args), kernels.get_backend("numpy")[name](*args)


def _close(a, b):
    if isinstance(a, tuple):
        for x, y in zip(a, b):
            _close(x, y)
    elif np.isscalar(a):
        assert a == pytest.approx(b, rel=1e-12, abs=1e-12)
    else:
        np.testing.assert_allclose(np.asarray(a, dtype=float), np.asarray(b, dtype=float), rtol=1e-10, atol=1e-12)


@needs_compiled
@pytest.mark.parametrize("seed", range(10))
def test_backends_agree(seed):
    rng, x, lengths = _case(seed)
    c = x.shape[1]
    w = rng.normal(size=(c, int(rng.choice([1, 3, 7]))))
    g = rng.normal(size=x.shape)
    _close(*_both("dwconv_forward", x, w))
    _close(*_both("dwconv_backward", g, x, w))
    mean, var, _ = kernels.get_backend("numpy")["bn_stats"](x, lengths)
    _close(*_both("bn_stats", x, lengths))
    scale, shift = rng.uniform(0.5, 2, c), rng.normal(size=c)
    inv_std = 1.0 / np.sqrt(var + 1e-5)
    for relu in (False, True):
        _close(*_both("affine_act_forward", x, scale, shift, relu))
        for training in (False, True):
            _close(*_both("bn_backward", g, x, scale, shift, mean, inv_std, lengths, relu, training))
    pooled, floored = kernels.get_backend("numpy")["stats_pool_forward"](x, lengths, 1e-10)
    _close(*_both("stats_pool_forward", x, lengths, 1e-10))
    gp = rng.normal(size=pooled.shape)
    _close(*_both("stats_pool_backward", gp, x, pooled, floored, lengths))
    fp, ff = kernels.get_backend("numpy")["bn_relu_pool_forward"](x, scale, shift, lengths, 1e-10)
    _close(*_both("bn_relu_pool_forward", x, scale, shift, lengths, 1e-10))
    for training in (False, True):
        _close(*_both("bn_relu_pool_backward", gp, x, scale, shift, mean, inv_std, fp, ff, lengths, training))


@needs_compiled
def test_floor_flags_agree():
    x = np.ones((2, 3, 5))
    lengths = np.array([5, 1], dtype=np.int64)
    a, b = _both("stats_pool_forward", x, lengths, 1e-10)
    np.testing.assert_array_equal(np.asarray(a[1]), np.asarray(b[1]))
    assert np.asarray(a[1]).all()


def test_set_backend_round_trip():
    before = kernels.BACKEND
    try:
        kernels.set_backend("numpy")
        assert kernels.BACKEND == "numpy"
    finally:
        kernels.set_backend(before)
    with pytest.raises(ValueError):
        kernels.set_backend("fortran")


def test_env_var_forces_pure_python():
    env = dict(os.environ, TITANET_LID_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from titanet_lid.nn import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


@needs_compiled
def test_model_logits_identical_across_backends(tiny_model, rng):
    x = rng.normal(size=(2, 6, 15))
    from titanet_lid.nn import SequenceMask
    mask = SequenceMask((15, 9), 15)
    before = kernels.BACKEND
    try:
        kernels.set_backend("compiled")
        a = tiny_model.forward(x, mask, mode="eval").data
        kernels.set_backend("numpy")
        b = tiny_model.forward(x, mask, mode="eval").data
    finally:
        kernels.set_backend(before)
    np.testing.assert_allclose(a, b, atol=1e-10)
