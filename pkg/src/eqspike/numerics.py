"""Dense float64 tensor ops with a small reverse-mode tape.

Every op accepts plain ``numpy`` arrays or :class:`Node` objects. Plain
inputs give a plain array back (the simulator path). If any input is a
``Node``, the result is a ``Node`` recorded on the tape.

Reverse accumulation walks nodes in descending creation order. Creation
order is a topological order, so gradient sums are deterministic.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

LN_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an op would produce NaN or Inf."""


class DimensionError(ValueError):
    pass


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(f"non-finite values in {what}")
    return x


class Node:
    """A value on the tape.

    Leaves created with ``requires_grad=True`` are parameters; ``name`` is
    used to key gradient maps.
    """

    __slots__ = ("value", "parents", "backward_fn", "requires_grad", "name", "id", "op")

    def __init__(self, value, parents: Sequence["Node"] = (), backward_fn=None,
                 requires_grad: bool = False, name: str | None = None, op: str = "leaf"):
        self.value = check_finite(np.asarray(value, dtype=np.float64), op)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.op = op
        self.id = next(_ids)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"Node({label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("Node division is only defined for scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def param(value, name: str | None = None) -> Node:
    return Node(np.array(value, dtype=np.float64), requires_grad=True, name=name)


def const(value) -> Node:
    return Node(np.array(value, dtype=np.float64))


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)


def _record(out: np.ndarray, inputs: Sequence, backward: Callable, op: str):
    """Wrap ``out`` in a Node when any input is on the tape."""
    if not any(isinstance(x, Node) for x in inputs):
        return check_finite(out, op)
    live = tuple(x for x in inputs if isinstance(x, Node) and x.requires_grad)
    if not live:
        return Node(out, op=op)
    # backward receives the output adjoint and returns one adjoint per input
    # (None for inputs that are not differentiable)
    mask = [isinstance(x, Node) and x.requires_grad for x in inputs]
    parents = tuple(x for x, m in zip(inputs, mask) if m)

    def fn(g):
        grads = backward(g)
        return tuple(gr for gr, m in zip(grads, mask) if m)

    return Node(out, parents=parents, backward_fn=fn, requires_grad=True, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    av, bv = value_of(a), value_of(b)
    out = av + bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)), "add")


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    out = av - bv
    return _record(out, (a, b), lambda g: (_unbroadcast(g, av.shape), -_unbroadcast(g, bv.shape)), "sub")


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    out = av * bv
    return _record(out, (a, b),
                   lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)), "mul")


def scale(a, c: float):
    av = value_of(a)
    return _record(av * c, (a,), lambda g: (g * c,), "scale")


def square(a):
    av = value_of(a)
    return _record(av * av, (a,), lambda g: (2.0 * av * g,), "square")


def clip01(x):
    """Clamp to [0, 1]; the adjoint is 1 strictly inside, 0 elsewhere."""
    xv = value_of(x)
    out = np.clip(xv, 0.0, 1.0)
    inside = (xv > 0.0) & (xv < 1.0)
    return _record(out, (x,), lambda g: (np.where(inside, g, 0.0),), "clip01")


def gelu(x):
    """Exact (erf) Gaussian-error linear unit."""
    xv = value_of(x)
    cdf = 0.5 * (1.0 + erf(xv / _SQRT2))
    out = xv * cdf

    def back(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xv * xv)
        return (g * (cdf + xv * pdf),)

    return _record(out, (x,), back, "gelu")


def pin(x, value):
    """Forward ``value``; pass the adjoint through to ``x`` unchanged.

    Training uses this to evaluate losses on simulated equilibrium rates
    while differentiating through the steady-state equations.
    """
    xv = value_of(x)
    v = np.asarray(value, dtype=np.float64)
    if v.shape != xv.shape:
        raise DimensionError(f"pin shape {v.shape} != {xv.shape}")
    return _record(v.copy(), (x,), lambda g: (g,), "pin")


# ------------------------------------------------------------------ structure

def reshape(x, shape):
    xv = value_of(x)
    return _record(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),), "reshape")


def transpose(x, axes):
    xv = value_of(x)
    inv = np.argsort(axes)
    return _record(np.transpose(xv, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x):
    axes = list(range(value_of(x).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def take(x, key):
    """Basic-slicing index, e.g. ``take(h, (slice(None), 0))``."""
    xv = value_of(x)

    def back(g):
        full = np.zeros_like(xv)
        full[key] += g
        return (full,)

    return _record(np.array(xv[key]), (x,), back, "take")


def gather_rows(table, idx):
    """``table[idx]`` for integer ``idx``; adjoints scatter-add back into rows."""
    tv = value_of(table)
    idx = np.asarray(idx)

    def back(g):
        full = np.zeros_like(tv)
        np.add.at(full, idx, g)
        return (full,)

    return _record(tv[idx], (table,), back, "gather")


def concat(xs: Sequence, axis: int = -1):
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _record(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


# --------------------------------------------------------------------- linear

def matmul(a, b):
    """Matrix product with numpy batch broadcasting."""
    av, bv = value_of(a), value_of(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError("matmul needs operands with at least 2 dims")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {av.shape} x {bv.shape}")
    out = np.matmul(av, bv)

    def back(g):
        ga = np.matmul(g, np.swapaxes(bv, -1, -2))
        gb = np.matmul(np.swapaxes(av, -1, -2), g)
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _record(out, (a, b), back, "matmul")


# ----------------------------------------------------------------- reductions

def sum_all(x):
    xv = value_of(x)
    return _record(np.array(xv.sum()), (x,), lambda g: (np.full_like(xv, g),), "sum")


def mean_all(x):
    xv = value_of(x)
    n = xv.size
    return _record(np.array(xv.mean()), (x,), lambda g: (np.full_like(xv, g / n),), "mean")


def mse(a, b):
    """Mean squared error over all elements."""
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape:
        raise DimensionError(f"mse shape mismatch {av.shape} vs {bv.shape}")
    return mean_all(square(sub(a, b)))


# --------------------------------------------------------------- row-wise ops

def softmax_rows(x):
    xv = value_of(x)
    if xv.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    e = np.exp(xv - xv.max(axis=-1, keepdims=True))
    out = e / e.sum(axis=-1, keepdims=True)
    return _record(out, (x,), lambda g: (out * (g - (g * out).sum(axis=-1, keepdims=True)),), "softmax")


def log_softmax_rows(x):
    xv = value_of(x)
    shifted = xv - xv.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _record(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),), "log_softmax")


def layer_norm(x, gain, shift):
    """Normalize the last axis to zero mean and unit variance, then apply gain and shift."""
    xv, gv, sv = value_of(x), value_of(gain), value_of(shift)
    if gv.shape != xv.shape[-1:] or sv.shape != xv.shape[-1:]:
        raise DimensionError("layer_norm gain/shift must match the last dimension")
    mu = xv.mean(axis=-1, keepdims=True)
    centered = xv - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = centered * inv
    out = xhat * gv + sv

    def back(g):
        gx_hat = g * gv
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, _unbroadcast(g * xhat, gv.shape), _unbroadcast(g, sv.shape)

    return _record(out, (x, gain, shift), back, "layer_norm")


def soft_cross_entropy(logits, target_probs):
    """Mean over rows of ``-sum(p * log_softmax(logits))``."""
    lv, pv = value_of(logits), value_of(target_probs)
    if lv.shape != pv.shape:
        raise DimensionError(f"cross-entropy shape mismatch {lv.shape} vs {pv.shape}")
    rows = max(1, lv.size // lv.shape[-1])
    logp = value_of(log_softmax_rows(lv))
    out = np.array(-(pv * logp).sum() / rows)

    def back(g):
        return (g * (np.exp(logp) - pv) / rows, -g * logp / rows)

    return _record(out, (logits, target_probs), back, "soft_ce")


# ------------------------------------------------------------------- backward

def _walk(root: Node) -> list[Node]:
    seen: dict[int, Node] = {}
    stack = [root]
    while stack:
        n = stack.pop()
        if n.id in seen or not n.requires_grad:
            continue
        seen[n.id] = n
        stack.extend(n.parents)
    return sorted(seen.values(), key=lambda n: n.id, reverse=True)


def count_nodes(root: Node) -> int:
    """Number of differentiable nodes reachable from ``root``."""
    return len(_walk(root))


def backward(loss: Node, seed: np.ndarray | None = None) -> dict[Node, np.ndarray]:
    """Adjoints of ``loss`` with respect to every reachable differentiable leaf.

    With no ``seed`` the loss must be a scalar. A seed turns this into a
    vector-Jacobian product for a tensor-valued node. The tape is not
    consumed and can be walked again with another seed.
    """
    if not isinstance(loss, Node):
        raise TypeError("backward needs a tape Node")
    if seed is None:
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        seed = np.ones_like(loss.value)
    else:
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.value.shape:
            raise DimensionError(f"seed shape {seed.shape} != {loss.value.shape}")
    order = _walk(loss)
    adj: dict[int, np.ndarray] = {loss.id: seed}
    leaves: dict[Node, np.ndarray] = {}
    for node in order:
        g = adj.pop(node.id, None)
        if g is None:
            continue
        if not node.parents:
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if parent.id in adj:
                adj[parent.id] = adj[parent.id] + pg
            else:
                adj[parent.id] = pg
    return leaves


def grads_by_name(grads: dict[Node, np.ndarray], leaves: Iterable[Node]) -> dict[str, np.ndarray]:
    """Gradient map keyed by leaf name; unreachable leaves get zeros."""
    out = {}
    for leaf in leaves:
        g = grads.get(leaf)
        out[leaf.name] = np.zeros_like(leaf.value) if g is None else g
    return out
