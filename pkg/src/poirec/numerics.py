"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations the recommender needs are provided.  Every op records a
closure that maps the output gradient to gradients of its inputs; ``backward``
walks the recorded graph in reverse topological order.

Randomness
----------
All stochastic code in the package draws from ``numpy.random.Generator``
instances backed by the Philox-4x64 counter-based bit generator (10 rounds,
numpy's implementation).  A stream is identified by a tuple of non-negative
integers, e.g. ``(seed, epoch, batch)``, which is fed to
``numpy.random.SeedSequence`` to produce the Philox key.  See :func:`make_rng`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "make_rng",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "matmul",
    "reshape",
    "transpose",
    "tensor_sum",
    "mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "softplus",
    "embedding_lookup",
    "take",
    "masked_fill",
    "dropout_mask",
    "backward",
    "grad_check",
    "grad_check_many",
    "GradCheckReport",
]

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def make_rng(*key: int) -> np.random.Generator:
    """Philox generator for the stream identified by ``key``."""
    ss = np.random.SeedSequence([int(k) for k in key])
    return np.random.Generator(np.random.Philox(ss))


class Tensor:
    """A float64 array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def check_finite(self) -> None:
        if not np.all(np.isfinite(self.data)):
            raise FloatingPointError(f"non-finite values in tensor {self.name or ''} {self.shape}")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=grad_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out the axes numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                         _unbroadcast(g * a.data, b.shape)))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with Phi the standard normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
    return _node(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def softplus(x: Tensor) -> Tensor:
    """``ln(1 + e^x)`` evaluated without overflow."""
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _node(out, (x,), lambda g: (g * sig,))


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; they get no gradient."""
    x = as_tensor(x)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, value, x.data)
    return _node(out, (x,), lambda g: (np.where(mask, 0.0, g),))


# -- linear algebra and shape ---------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics for leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), grad_fn)


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def take(x: Tensor, index) -> Tensor:
    """Numpy-style indexing; the gradient scatters back additively."""
    x = as_tensor(x)
    out = x.data[index]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (x,), grad_fn)


def tensor_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(out, (x,), grad_fn)


def mean(x: Tensor, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tensor_sum(x, axis=axis), 1.0 / count)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Gather rows of ``table``; output shape is ``indices.shape + (d,)``."""
    idx = np.asarray(indices, dtype=np.int64)
    rows = table.shape[0]
    bad = (idx < 0) | (idx >= rows)
    if bad.any():
        raise IndexError(f"embedding index {int(idx[bad].flat[0])} out of range [0, {rows})")
    out = table.data[idx]

    def grad_fn(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _node(out, (table,), grad_fn)


# -- normalisation ----------------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), grad_fn)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    """Normalise over the last axis, then apply ``gain`` and ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(f"layer_norm expects gain/bias of shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gain.data + bias.data

    def grad_fn(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dxhat = g * gain.data
        dx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _node(out, (x, gain, bias), grad_fn)


# -- stochastic ------------------------------------------------------------

def dropout_mask(shape, rate: float, rng: np.random.Generator | None,
                 training: bool = True) -> Tensor:
    """Inverted-dropout keep mask: Bernoulli(1 - rate) scaled by ``1/(1 - rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0 or not training:
        return Tensor(np.ones(shape))
    keep = rng.random(shape) >= rate
    return Tensor(keep / (1.0 - rate))


# -- reverse pass ------------------------------------------------------------

def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad.

    Intermediate gradients live only for the duration of the call, so calling
    twice without zeroing adds the gradients of both calls on the leaves.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# -- finite-difference checking ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst: tuple | None
    checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _rel_error(a: float, n: float, floor: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def grad_check_many(f: Callable[[], Tensor], tensors: Mapping[str, Tensor],
                    step: float = 1e-5, tolerance: float = 1e-4,
                    max_coords: int | None = None,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` with central differences.

    ``f`` takes no arguments and must read the tensors in ``tensors``; their
    ``data`` arrays are perturbed in place and restored.  With ``max_coords``
    set, at most that many coordinates per tensor are checked, chosen by ``rng``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for t in tensors.values():
        t.grad = None
    backward(f())
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for k, t in tensors.items()}

    worst_rel, worst_abs, worst, checked = 0.0, 0.0, None, 0
    for key, t in tensors.items():
        flat = t.data.reshape(-1)
        coords: Iterable[int] = range(flat.size)
        if max_coords is not None and flat.size > max_coords:
            chooser = rng if rng is not None else make_rng(0)
            coords = np.sort(chooser.choice(flat.size, size=max_coords, replace=False))
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            fp = f().item()
            flat[i] = orig - step
            fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            a = float(analytic[key].reshape(-1)[i])
            rel = _rel_error(a, numeric, floor)
            worst_abs = max(worst_abs, abs(a - numeric))
            checked += 1
            if rel > worst_rel:
                worst_rel, worst = rel, (key, int(i), a, numeric)
    for t in tensors.values():
        t.grad = None
    return GradCheckReport(worst_rel, worst_abs, worst, checked, tolerance)


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, step: float = 1e-5,
               tolerance: float = 1e-4, **kwargs) -> GradCheckReport:
    """Single-input form of :func:`grad_check_many`; ``f`` maps ``point`` to a scalar."""
    if not point.requires_grad:
        point = Tensor(point.data.copy(), requires_grad=True)
    return grad_check_many(lambda: f(point), {"x": point}, step=step,
                           tolerance=tolerance, **kwargs)
