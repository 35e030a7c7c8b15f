"""Central-difference gradient checking."""
import numpy as np

from titanet_lid.errors import ContractError
from titanet_lid.nn.tensor import Tensor


def _scalar(value):
    if not isinstance(value, Tensor) or value.data.size != 1:
        shape = value.shape if isinstance(value, Tensor) else type(value).__name__
        raise ContractError(f"grad_check needs a scalar Tensor output, got {shape}")
    return float(value.data.reshape(-1)[0])


def grad_check(f, x, eps=1e-5, indices=None):
    """Return the max over coordinates of ``|analytic - numeric| / max(1, |analytic|)``.

    ``f`` maps nothing to a scalar Tensor and must read ``x.data`` on each call;
    ``x`` is the leaf being checked. ``indices`` restricts the check to a subset
    of flat coordinates (useful for large parameter tensors).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    out = f()
    _scalar(out)
    out.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
    x.grad = None

    flat = x.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        up = _scalar(f())
        flat[i] = orig - eps
        down = _scalar(f())
        flat[i] = orig
        numeric = (up - down) / (2.0 * eps)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
