"""Differentiable ops needed by the TitaNet-LID graph.

Time-series tensors are laid out ``[N, C, T]``; the convolution and pooling
ops also accept a single unbatched ``[C, T]`` item. Masked ops take a
:class:`SequenceMask` and ignore everything beyond each item's length.
"""
import numpy as np

from titanet_lid.errors import DegenerateInputError, DimensionError, LabelError
from titanet_lid.nn import kernels
from titanet_lid.nn.tensor import SequenceMask, Tensor, as_tensor, make_node

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
STD_FLOOR = 1e-10


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_node(out, (a, b), backward)


def sum(x):  # noqa: A001 - mirrors numpy naming
    shape = x.shape

    def backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return make_node(np.asarray(x.data.sum()), (x,), backward)


def mean(x):
    n = x.data.size
    shape = x.shape

    def backward(g):
        return (np.full(shape, np.asarray(g).item() / n),)

    return make_node(np.asarray(x.data.mean()), (x,), backward)


def square(x):
    def backward(g):
        return (2.0 * x.data * g,)

    return make_node(x.data * x.data, (x,), backward)


def reshape(x, shape):
    old = x.shape

    def backward(g):
        return (g.reshape(old),)

    return make_node(x.data.reshape(shape), (x,), backward)


def relu(x):
    out = np.maximum(x.data, 0.0)

    def backward(g):
        return (np.where(out > 0.0, g, 0.0),)

    return make_node(out, (x,), backward)


def sigmoid(x):
    y = np.empty_like(x.data)
    pos = x.data >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ez = np.exp(x.data[~pos])
    y[~pos] = ez / (1.0 + ez)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_node(y, (x,), backward)


def dropout(x, p, training, rng=None):
    """Inverted dropout: zero with probability ``p`` and rescale survivors by ``1/(1-p)``."""
    if not training or p <= 0.0:
        return x
    if p >= 1.0:
        raise ValueError("dropout probability must be < 1")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def backward(g):
        return (g * keep,)

    return make_node(x.data * keep, (x,), backward)


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return make_node(y, (x,), backward)


def _as_batch(x):
    if x.ndim == 2:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [C, T] or [N, C, T], got shape {x.shape}")
    return x, False


def _unbatch(out, squeezed):
    return reshape(out, out.shape[1:]) if squeezed else out


def _mask_array(x, mask):
    if mask is None:
        return None
    if not isinstance(mask, SequenceMask):
        raise TypeError("mask must be a SequenceMask")
    mask.check(x)
    return mask.array()


def mask_time(x, mask):
    """Zero frames beyond each item's valid length."""
    if mask is None or mask.is_full:
        return x
    m = _mask_array(x, mask)[:, None, :]

    def backward(g):
        return (g * m,)

    return make_node(x.data * m, (x,), backward)


def conv1d_depthwise(x, kernel):
    """Per-channel 1D convolution, stride 1, same zero padding, odd kernel width."""
    x, squeezed = _as_batch(as_tensor(x))
    kernel = as_tensor(kernel)
    if kernel.ndim != 2:
        raise DimensionError(f"kernel must be [C, K], got {kernel.shape}")
    if kernel.shape[0] != x.shape[1]:
        raise DimensionError(f"kernel has {kernel.shape[0]} channels, input has {x.shape[1]}")
    if kernel.shape[1] % 2 == 0:
        raise DimensionError(f"kernel width must be odd, got {kernel.shape[1]}")
    out = kernels.dwconv_forward(x.data, kernel.data)

    def backward(g):
        gx, gw = kernels.dwconv_backward(g, x.data, kernel.data)
        return gx, gw

    return _unbatch(make_node(out, (x, kernel), backward), squeezed)


def conv1d_pointwise(x, weight, bias=None):
    """1x1 convolution: ``out[o, t] = sum_i weight[o, i] * x[i, t] (+ bias[o])``."""
    x, squeezed = _as_batch(as_tensor(x))
    weight = as_tensor(weight)
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"weight {weight.shape} does not match input channels {x.shape[1]}")
    out = np.matmul(weight.data, x.data)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias {bias.shape} does not match {weight.shape[0]} outputs")
        out += bias.data[None, :, None]
        parents.append(bias)

    def backward(g):
        gx = np.matmul(weight.data.T, g) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.zeros(weight.shape)
            for n in range(x.shape[0]):
                gw += g[n] @ x.data[n].T
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _unbatch(make_node(out, parents, backward), squeezed)


def _valid_lengths(x, mask):
    if mask is None:
        return np.full(x.shape[0], x.shape[2], dtype=np.int64)
    mask.check(x)
    return np.asarray(mask.lengths, dtype=np.int64)


def _bn_affine(x, gamma, lengths, running_mean, running_var, training, momentum, eps):
    """Per-channel ``(mean, inv_std, scale)``; train mode also updates the running buffers."""
    if training:
        mean_, var, count = kernels.bn_stats(x.data, lengths)
        if count < 2:
            raise DegenerateInputError(
                f"batchnorm1d needs >= 2 valid frames per channel in train mode, got {int(count)}"
            )
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean_
        running_var *= 1.0 - momentum
        running_var += momentum * var * count / (count - 1.0)
    else:
        mean_, var = running_mean.copy(), running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    return mean_, inv_std, gamma.data * inv_std


def _batchnorm(x, gamma, beta, running_mean, running_var, training, mask, momentum, eps, relu):
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"batchnorm1d expects [N, C, T], got {x.shape}")
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    lengths = _valid_lengths(x, mask)
    mean_, inv_std, scale = _bn_affine(x, gamma, lengths, running_mean, running_var, training, momentum, eps)
    shift = beta.data - mean_ * scale
    out = kernels.affine_act_forward(x.data, scale, shift, relu)

    def backward(g):
        return kernels.bn_backward(g, x.data, scale, shift, mean_, inv_std, lengths, relu, training)

    return make_node(out, (x, gamma, beta), backward)


def batchnorm1d(x, gamma, beta, running_mean, running_var, training, mask=None,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over the valid ``(batch, time)`` positions of each channel.

    Train mode normalizes with batch statistics of the unmasked positions and
    updates the numpy buffers ``running_mean`` / ``running_var`` in place by an
    exponential moving average (fed the unbiased variance). Eval mode uses the
    running estimates.
    """
    return _batchnorm(x, gamma, beta, running_mean, running_var, training, mask, momentum, eps, False)


def batchnorm_relu(x, gamma, beta, running_mean, running_var, training, mask=None,
                   momentum=BN_MOMENTUM, eps=BN_EPS):
    """``relu(batchnorm1d(...))`` fused into one pass."""
    return _batchnorm(x, gamma, beta, running_mean, running_var, training, mask, momentum, eps, True)


def _lengths(x, mask):
    if mask is None:
        return np.full(x.shape[0], float(x.shape[2])), None
    m = _mask_array(x, mask)
    return np.asarray(mask.lengths, dtype=np.float64), m[:, None, :]


def global_avg_pool_time(x, mask=None):
    """Per-channel mean over valid frames: ``[N, C, T] -> [N, C]``."""
    x, squeezed = _as_batch(as_tensor(x))
    if x.shape[2] < 1:
        raise DegenerateInputError("cannot pool an empty sequence")
    lens, m = _lengths(x, mask)
    xm = x.data if m is None else x.data * m
    out = xm.sum(axis=2) / lens[:, None]

    def backward(g):
        gx = np.broadcast_to((g / lens[:, None])[:, :, None], x.shape)
        return (gx * m if m is not None else gx.copy(),)

    node = make_node(out, (x,), backward)
    return reshape(node, node.shape[1:]) if squeezed else node


def stats_pool(x, mask=None, floor=STD_FLOOR):
    """Concatenate per-channel mean and population std over valid frames: ``[N, C, T] -> [N, 2C]``.

    The variance is floored at ``floor`` before the square root.
    """
    x, squeezed = _as_batch(as_tensor(x))
    lengths = _valid_lengths(x, mask)
    if x.shape[2] < 1 or lengths.min() < 1:
        raise DegenerateInputError("cannot pool an empty sequence")
    out, floored = kernels.stats_pool_forward(x.data, lengths, floor)

    def backward(g):
        return (kernels.stats_pool_backward(g, x.data, out, floored, lengths),)

    node = make_node(out, (x,), backward)
    return reshape(node, node.shape[1:]) if squeezed else node


def batchnorm_relu_stats_pool(x, gamma, beta, running_mean, running_var, training, mask=None,
                              momentum=BN_MOMENTUM, eps=BN_EPS, floor=STD_FLOOR):
    """``stats_pool(batchnorm_relu(x), mask)`` without keeping the activation around."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"batchnorm1d expects [N, C, T], got {x.shape}")
    gamma, beta = as_tensor(gamma), as_tensor(beta)
    lengths = _valid_lengths(x, mask)
    if x.shape[2] < 1 or lengths.min() < 1:
        raise DegenerateInputError("cannot pool an empty sequence")
    mean_, inv_std, scale = _bn_affine(x, gamma, lengths, running_mean, running_var, training, momentum, eps)
    shift = beta.data - mean_ * scale
    out, floored = kernels.bn_relu_pool_forward(x.data, scale, shift, lengths, floor)

    def backward(g):
        return kernels.bn_relu_pool_backward(g, x.data, scale, shift, mean_, inv_std, out, floored,
                                             lengths, training)

    return make_node(out, (x, gamma, beta), backward)


def scale_channels(x, s):
    """Broadcast multiply ``x[N, C, T] * s[N, C]`` over time."""
    x, s = as_tensor(x), as_tensor(s)
    if s.shape != x.shape[:2]:
        raise DimensionError(f"scale {s.shape} does not match {x.shape[:2]}")
    out = x.data * s.data[:, :, None]

    def backward(g):
        return g * s.data[:, :, None], np.einsum("nct,nct->nc", g, x.data)

    return make_node(out, (x, s), backward)


def linear(x, weight, bias=None):
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape ``[N, D]`` or ``[D]``."""
    x, weight = as_tensor(x), as_tensor(weight)
    squeezed = x.ndim == 1
    if squeezed:
        x = reshape(x, (1, x.shape[0]))
    if weight.ndim != 2 or x.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"bias {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    node = make_node(out, parents, backward)
    return reshape(node, (weight.shape[0],)) if squeezed else node


def log_softmax_array(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def weighted_cross_entropy(logits, targets, weights=None):
    """Cross entropy with per-class weights, reduced by the sum of selected weights.

    ``loss = sum_n w[t_n] * -log softmax(z_n)[t_n] / sum_n w[t_n]``; with
    uniform weights this is the plain mean cross entropy.
    """
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, K], got {logits.shape}")
    n, k = logits.shape
    targets = np.asarray(targets)
    if targets.shape != (n,) or not np.issubdtype(targets.dtype, np.integer):
        raise LabelError(f"targets must be {n} integer class indices")
    if n and (targets.min() < 0 or targets.max() >= k):
        raise LabelError(f"target index out of range [0, {k})")
    if weights is None:
        w = np.ones(k)
    else:
        w = np.asarray(getattr(weights, "weights", weights), dtype=np.float64)
        if w.shape != (k,):
            raise DimensionError(f"{w.shape[0] if w.ndim else 0} class weights for {k} classes")
    logp = log_softmax_array(logits.data)
    wn = w[targets]
    total = wn.sum()
    loss = -(wn * logp[np.arange(n), targets]).sum() / total

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), targets] -= 1.0
        return (np.asarray(g).item() * p * (wn / total)[:, None],)

    return make_node(np.asarray(loss), (logits,), backward)
