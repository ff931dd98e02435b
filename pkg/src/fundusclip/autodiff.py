"""Dense float64 tensors with reverse-mode automatic differentiation.

The operation set is deliberately small: exactly what the two encoders and
the contrastive loss need.  Every op eagerly computes its forward value with
numpy and, when any input participates in differentiation, records a
vector-Jacobian closure on the implicit tape (the chain of parent links).
``backward`` consumes that tape once; a second backward on the same loss
raises.

Convolution uses im2col + matmul so there is a single well-tested GEMM path;
the patch matrix is recomputed during backward instead of being kept alive,
trading a little compute for memory.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "MissingGradientError", "Adam",
    "add", "subtract", "multiply", "scalar_multiply", "matmul", "conv2d",
    "relu", "gelu", "log", "exp", "layer_norm", "softmax", "mean", "sum_", "amax",
    "transpose", "reshape", "concat", "embedding_lookup", "l2_normalize",
    "backward", "standard_normal", "zero_grads",
]

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        detail = " and ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {detail}")


class MissingGradientError(RuntimeError):
    """Raised by the optimizer when a parameter has no gradient."""


class Tensor:
    """Immutable-by-convention dense float64 array, optionally differentiable."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._vjp = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        return multiply(self, other)

    def __rmul__(self, other):
        return multiply(other, self)

    def __neg__(self):
        return scalar_multiply(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents, vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcasted gradient back to the original operand shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def backward(loss: Tensor) -> dict:
    """Run reverse-mode differentiation from a scalar loss.

    Populates ``.grad`` (accumulating) on every requires_grad leaf reachable
    from ``loss`` and returns a map ``leaf Tensor -> gradient array``.
    """
    if loss.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise RuntimeError("tape already consumed: backward was called twice on this loss")
    if not loss.requires_grad:
        raise RuntimeError("loss does not require grad; nothing to differentiate")

    # iterative topological sort over the parent DAG
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            leaf_map[node] = node.grad
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad or pg is None:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg if acc is None else acc + pg
    loss._consumed = True
    return leaf_map


def zero_grads(params) -> None:
    """Clear gradients on an iterable (or dict) of parameter tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError("add", a.shape, b.shape) from None
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError("subtract", a.shape, b.shape) from None
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError("multiply", a.shape, b.shape) from None
    return _result(data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape),
                              _unbroadcast(g * a.data, b.shape)))


def scalar_multiply(a, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        data = a.data @ b.data
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(data, (a, b), vjp)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Padded input [B,C,H,W] -> patch matrix [B*OH*OW, C*kh*kw]."""
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [B,C,OH,OW,kh,kw]
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, x:[B,C,H,W], w:[O,C,kh,kw] -> [B,O,OH,OW]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    if H + 2 * padding < kh or W + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, w.shape)
    oh = (H + 2 * padding - kh) // stride + 1
    ow = (W + 2 * padding - kw) // stride + 1

    def padded(arr):
        if padding == 0:
            return arr
        return np.pad(arr, ((0, 0), (0, 0), (padding, padding), (padding, padding)))

    wmat = w.data.reshape(O, C * kh * kw)
    cols = _im2col(padded(x.data), kh, kw, stride)
    out = (cols @ wmat.T).reshape(B, oh, ow, O).transpose(0, 3, 1, 2)

    def vjp(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * oh * ow, O)
        cols_b = _im2col(padded(x.data), kh, kw, stride)  # recompute, not stored
        gw = (gmat.T @ cols_b).reshape(w.shape)
        gcols = (gmat @ wmat).reshape(B, oh, ow, C, kh, kw)
        gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp if padding == 0 else gxp[:, :, padding:-padding, padding:-padding]
        return gx, gw

    return _result(out, (x, w), vjp)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(x) -> Tensor:
    x = _as_tensor(x)
    data = np.maximum(x.data, 0.0)
    return _result(data, (x,), lambda g: (g * (x.data > 0.0),))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    data = x.data * phi

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _result(data, (x,), vjp)


def log(x) -> Tensor:
    x = _as_tensor(x)
    data = np.log(x.data)
    return _result(data, (x,), lambda g: (g / x.data,))


def exp(x) -> Tensor:
    x = _as_tensor(x)
    data = np.exp(x.data)
    return _result(data, (x,), lambda g: (g * data,))


def layer_norm(x, axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Normalize to zero mean / unit variance along one axis (no affine)."""
    x = _as_tensor(x)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    sigma = np.sqrt(var + eps)
    y = (x.data - mu) / sigma

    def vjp(g):
        gm = g.mean(axis=axis, keepdims=True)
        gym = (g * y).mean(axis=axis, keepdims=True)
        return ((g - gm - y * gym) / sigma,)

    return _result(y, (x,), vjp)


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    if x.shape[axis] == 0:
        raise ShapeError("softmax", x.shape)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (x,), vjp)


def l2_normalize(x, axis: int = -1, eps: float = 1e-12) -> Tensor:
    x = _as_tensor(x)
    n = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True) + eps)
    y = x.data / n

    def vjp(g):
        dot = (x.data * g).sum(axis=axis, keepdims=True)
        return (g / n - x.data * (dot / n ** 3),)

    return _result(y, (x,), vjp)


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(data, (x,), vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size if axis is None else np.prod(
        [x.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape) / count,)

    return _result(data, (x,), vjp)


def amax(x, axis=None, keepdims: bool = False) -> Tensor:
    """Maximum over the given axes; the gradient flows to the max positions
    (split evenly across exact ties)."""
    x = _as_tensor(x)
    data = x.data.max(axis=axis, keepdims=keepdims)

    def vjp(g):
        expanded = x.data.max(axis=axis, keepdims=True)
        mask = (x.data == expanded).astype(np.float64)
        mask /= mask.sum(axis=axis, keepdims=True)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (mask * g,)

    return _result(data, (x,), vjp)


def transpose(x, axes=None) -> Tensor:
    x = _as_tensor(x)
    data = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort([a % x.ndim for a in axes])

    def vjp(g):
        return (np.transpose(g, inv),)

    return _result(data, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _result(data, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(data, tensors, vjp)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table`` [V,D] by an integer index array."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding_lookup ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ValueError(
            f"embedding_lookup: id out of range for table of {table.shape[0]} rows")
    data = table.data[ids]

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _result(data, (table,), vjp)


def standard_normal(rng, shape, requires_grad: bool = False) -> Tensor:
    """Draw a tensor of N(0,1) samples from a deterministic stream."""
    return Tensor(rng.standard_normal(shape), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam with bias correction over a named parameter dict."""

    def __init__(self, params: dict, learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8):
        if not (0.0 < beta1 < 1.0 and 0.0 < beta2 < 1.0):
            raise ValueError("betas must lie in (0, 1)")
        if epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        self.params = params
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.step_count = 0
        self.first_moment = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.second_moment = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise MissingGradientError(f"parameter '{name}' has no gradient")
            if p.grad.shape != p.data.shape:
                raise ShapeError("adam_step", p.grad.shape, p.data.shape)
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self.first_moment[name]
            v = self.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.epsilon)

    def zero_grad(self) -> None:
        zero_grads(self.params)
