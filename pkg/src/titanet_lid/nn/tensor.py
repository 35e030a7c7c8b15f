"""A small float64 tensor with a reverse-mode gradient tape."""
import contextlib
from dataclasses import dataclass

import numpy as np

from titanet_lid.errors import ContractError, DimensionError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """An n-d float64 array that can take part in the gradient tape.

    Leaves are created directly; non-leaf tensors are produced by the ops in
    :mod:`titanet_lid.nn.functional` and carry a backward closure mapping the
    upstream gradient to one gradient per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = None
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._parents is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} != tensor shape {self.shape}")
        if not self.requires_grad:
            return

        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if node._parents is not None:
                for p in node._parents:
                    if p.requires_grad and id(p) not in seen:
                        stack.append((p, False))

        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._parents is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # Arithmetic sugar routed through the functional ops.
    def __add__(self, other):
        from titanet_lid.nn import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from titanet_lid.nn import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        from titanet_lid.nn import functional as F
        return F.add(self, F.mul(as_tensor(other), -1.0))

    def __rsub__(self, other):
        from titanet_lid.nn import functional as F
        return F.add(as_tensor(other), F.mul(self, -1.0))

    def __neg__(self):
        from titanet_lid.nn import functional as F
        return F.mul(self, -1.0)

    def sum(self):
        from titanet_lid.nn import functional as F
        return F.sum(self)

    def mean(self):
        from titanet_lid.nn import functional as F
        return F.mean(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward):
    """Wrap ``data`` as the output of an op; records the graph only when needed."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


@dataclass(frozen=True)
class SequenceMask:
    """Valid-frame lengths of a padded ``[N, C, T]`` batch."""

    lengths: tuple
    max_len: int

    def __post_init__(self):
        lengths = tuple(int(n) for n in self.lengths)
        object.__setattr__(self, "lengths", lengths)
        if not lengths:
            raise DimensionError("SequenceMask needs at least one item")
        for i, n in enumerate(lengths):
            if not 1 <= n <= self.max_len:
                raise DimensionError(f"length[{i}]={n} outside [1, {self.max_len}]")

    @classmethod
    def full(cls, batch, max_len):
        return cls((max_len,) * batch, max_len)

    @property
    def batch(self):
        return len(self.lengths)

    @property
    def is_full(self):
        return all(n == self.max_len for n in self.lengths)

    def array(self):
        """Float mask of shape ``[N, T]`` with ones on valid frames."""
        t = np.arange(self.max_len)
        return (t[None, :] < np.asarray(self.lengths)[:, None]).astype(np.float64)

    def check(self, x):
        if x.shape[0] != self.batch or x.shape[-1] != self.max_len:
            raise DimensionError(
                f"mask (batch={self.batch}, max_len={self.max_len}) does not fit tensor {x.shape}"
            )
