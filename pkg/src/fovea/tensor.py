"""Dense float64 tensors with reverse-mode gradients.

Deliberately small: only the operations the tokenization/attention/head
stack needs, all in double precision. Ops are pure functions over
immutable inputs; calling backward() on a scalar accumulates gradients
into the participating leaves. Validity is defined operationally by
grad_check, which compares every reverse-mode gradient against central
finite differences.
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "ParamLeaf",
    "ShapeError",
    "as_tensor",
    "no_grad",
    "matmul",
    "transpose",
    "reshape",
    "concat",
    "stack",
    "take_rows",
    "select",
    "repeat_rows",
    "tsum",
    "tmean",
    "exp",
    "log",
    "gelu",
    "sigmoid",
    "softmax_with_bias",
    "layer_norm",
    "l2_normalize",
    "cross_entropy_mean",
    "bilinear_sample",
    "grad_check",
    "GradCheckError",
]

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GradCheckError(RuntimeError):
    """Raised when a finite-difference probe produces a non-finite loss."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-speed path)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """A float64 ndarray plus an optional backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; all arithmetic goes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(other, mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        raise TypeError("tensor division only supports scalars; use explicit ops")

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into leaf .grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] += pg
                    else:
                        grads[key] = pg
            elif node.grad is not None:
                node.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    track = _grad_enabled and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class ParamLeaf:
    """A named learnable tensor with a same-shape gradient accumulator."""

    __slots__ = ("name", "tensor")

    def __init__(self, name: str, value):
        self.name = name
        self.tensor = Tensor(np.array(value, dtype=np.float64), requires_grad=True)

    @property
    def value(self) -> np.ndarray:
        return self.tensor.data

    @property
    def gradient(self) -> np.ndarray:
        return self.tensor.grad

    def zero_grad(self) -> None:
        self.tensor.grad[...] = 0.0

    def __repr__(self):
        return f"ParamLeaf({self.name!r}, shape={self.tensor.data.shape})"


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward)


def matmul(a, b) -> Tensor:
    """Matrix product; batched leading dims follow numpy matmul rules.

    Inner dimensions must agree. Summation over the inner dimension is
    delegated to numpy's GEMM, which is deterministic run-to-run.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 1 or b.data.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions disagree for shapes {a.data.shape} and {b.data.shape}"
        )
    data = a.data @ b.data

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), backward)


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return _make(data, (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    orig = x.data.shape
    data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(orig),)

    return _make(data, (x,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(data, tensors, backward)


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        pieces = np.split(g, len(tensors), axis=axis)
        return tuple(np.squeeze(p, axis=axis) for p in pieces)

    return _make(data, tensors, backward)


def take_rows(x, indices) -> Tensor:
    """Gather rows along axis 0; backward scatter-adds into place."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    data = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(data, (x,), backward)


def select(x, i: int) -> Tensor:
    """Single index along axis 0 (drops the axis)."""
    x = as_tensor(x)
    data = x.data[i]

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[i] = g
        return (gx,)

    return _make(data, (x,), backward)


def repeat_rows(x, n: int) -> Tensor:
    """Tile a vector (or matrix) n times along a new leading row axis."""
    x = as_tensor(x)
    data = np.broadcast_to(x.data, (n,) + x.data.shape).copy()

    def backward(g):
        return (g.sum(axis=0),)

    return _make(data, (x,), backward)


def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, x.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, x.data.shape).copy(),)

    return _make(np.asarray(data), (x,), backward)


def tmean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def exp(x) -> Tensor:
    x = as_tensor(x)
    data = np.exp(x.data)

    def backward(g):
        return (g * data,)

    return _make(data, (x,), backward)


def log(x) -> Tensor:
    x = as_tensor(x)
    data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(data, (x,), backward)


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * cdf

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (cdf + x.data * pdf),)

    return _make(data, (x,), backward)


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    data = np.where(
        x.data >= 0,
        1.0 / (1.0 + np.exp(-np.abs(x.data))),
        np.exp(-np.abs(x.data)) / (1.0 + np.exp(-np.abs(x.data))),
    )

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (x,), backward)


def softmax_with_bias(logits, bias=None) -> Tensor:
    """Row softmax over the last axis of logits + bias.

    bias is a constant (no gradient) broadcastable along the last axis.
    Entries of -inf in bias exclude the corresponding column exactly
    (weight 0); everything else is computed with max-subtraction so rows
    of any finite magnitude normalize without overflow.
    """
    x = as_tensor(logits)
    if bias is None:
        z = x.data
    else:
        b = bias.data if isinstance(bias, Tensor) else np.asarray(bias, dtype=np.float64)
        if b.shape[-1] != x.data.shape[-1]:
            raise ShapeError(
                f"softmax bias last axis {b.shape} does not match logits {x.data.shape}"
            )
        z = x.data + b
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    data = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=-1, keepdims=True)
        return (data * (g - inner),)

    return _make(data, (x,), backward)


def layer_norm(x, gain, shift, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    eps > 0 keeps the constant-row case finite (zero variance).
    """
    if eps <= 0:
        raise ValueError("layer_norm eps must be > 0")
    x, gain, shift = as_tensor(x), as_tensor(gain), as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    data = xhat * gain.data + shift.data

    def backward(g):
        gg = g * gain.data
        gx = (
            gg - gg.mean(axis=-1, keepdims=True) - xhat * (gg * xhat).mean(axis=-1, keepdims=True)
        ) * inv
        ggain = _unbroadcast(g * xhat, gain.data.shape)
        gshift = _unbroadcast(g, shift.data.shape)
        return gx, ggain, gshift

    return _make(data, (x, gain, shift), backward)


def l2_normalize(x, eps: float = 1e-24) -> Tensor:
    """Scale rows (last axis) to unit L2 norm; a zero row stays zero."""
    x = as_tensor(x)
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True) + eps)
    data = x.data / norm

    def backward(g):
        inner = (g * x.data).sum(axis=-1, keepdims=True)
        return (g / norm - x.data * (inner / norm**3),)

    return _make(data, (x,), backward)


def cross_entropy_mean(logits, labels) -> Tensor:
    """Mean cross-entropy of integer labels against row logits."""
    x = as_tensor(logits)
    y = np.asarray(labels, dtype=np.intp)
    n, k = x.data.shape
    if y.shape != (n,) or y.min(initial=0) < 0 or (y.size and y.max() >= k):
        raise ValueError(f"labels must be ints in [0, {k}) with shape ({n},)")
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    p = e / e.sum(axis=-1, keepdims=True)
    rows = np.arange(n)
    nll = -np.log(p[rows, y])
    data = np.asarray(nll.mean())

    def backward(g):
        gx = p.copy()
        gx[rows, y] -= 1.0
        return (gx * (float(g) / n),)

    return _make(data, (x,), backward)


# ---------------------------------------------------------------------------
# resampling (no gradient path; fields and sample points are constants)


def bilinear_sample(field: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Sample a [C, H, W] field at normalized (x, y) points in [0, 1].

    Convention (frozen): coordinate u maps to continuous pixel u * (W - 1),
    so u = j / (W - 1) reproduces grid node j exactly. Points are clamped
    to [0, 1] first; after clamping no out-of-range access can occur.
    Returns [N, C]; an empty point list yields an empty [0, C] result.
    """
    field = np.asarray(field, dtype=np.float64)
    c, h, w = field.shape
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if pts.shape[0] == 0:
        return np.zeros((0, c))
    px = np.clip(pts[:, 0], 0.0, 1.0) * (w - 1)
    py = np.clip(pts[:, 1], 0.0, 1.0) * (h - 1)
    x0 = np.clip(np.floor(px).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(py).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = px - x0
    fy = py - y0
    f00 = field[:, y0, x0]
    f01 = field[:, y0, x1]
    f10 = field[:, y1, x0]
    f11 = field[:, y1, x1]
    out = (
        f00 * (1 - fx) * (1 - fy)
        + f01 * fx * (1 - fy)
        + f10 * (1 - fx) * fy
        + f11 * fx * fy
    )
    return out.T.copy()


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(
    loss_fn,
    params,
    eps: float = 1e-5,
    entries_per_leaf: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    loss_fn must be a deterministic scalar function of the given leaves.
    With entries_per_leaf set, a seeded random subset of entries is probed
    per leaf (two forward passes per entry make exhaustive probing
    impractical for large leaves). Relative error is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise GradCheckError("loss is non-finite at the unperturbed point")
    loss.backward()
    analytic = {p.name: p.gradient.copy() for p in params}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.tensor.data.reshape(-1)
        if entries_per_leaf is None or entries_per_leaf >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=entries_per_leaf, replace=False)
        aflat = analytic[p.name].reshape(-1)
        for i in idxs:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                f_plus = float(loss_fn().data)
                flat[i] = orig - eps
                f_minus = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GradCheckError(
                    f"non-finite loss while perturbing {p.name}[{int(i)}]"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(aflat[i] - numeric) / max(1.0, abs(aflat[i]), abs(numeric))
            worst = max(worst, rel)
    return worst
