"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` holding a
closure that maps the upstream gradient to gradients of its inputs.  Calling
:func:`backward` on a scalar walks the recorded graph in reverse topological
order (the tape) and accumulates gradients into the leaves.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Iterator, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "ConfigurationError",
    "tensor",
    "conv2d",
    "linear",
    "relu",
    "tanh",
    "softmax",
    "log",
    "cross_entropy",
    "upsample_bilinear",
    "avg_pool2d",
    "bilinear_matrix",
    "concat",
    "stack",
    "backward",
    "no_grad",
    "topological_order",
    "poly_lr",
    "sgd_step",
    "SGD",
    "he_uniform",
]

CHECK_FINITE = True
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """Operation hyperparameters do not describe a valid computation."""


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: tuple = (),
        _backward: Optional[BackwardFn] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
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

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def backward(self) -> None:
        backward(self)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other, self.dtype)))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tmean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A named leaf tensor that the optimizer updates in place."""

    __slots__ = ()

    def __init__(self, name: str, data):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.array(data, dtype=dtype if dtype is not None else np.float64)
    return Tensor(arr, requires_grad=requires_grad)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else np.float64))


def _result(data: np.ndarray, parents: tuple, fn: BackwardFn, op: str) -> Tensor:
    if CHECK_FINITE and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


@contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape

    def fn(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), fn, "add")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data

    def fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), fn, "mul")


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _result(out, (a, b), fn, "div")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _result(np.maximum(x.data, 0), (x,), lambda g: (g * keep,), "relu")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _result(y, (x,), lambda g: (g * (1 - y * y),), "tanh")


def log(x: Tensor) -> Tensor:
    xd = x.data
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(xd)
    return _result(y, (x,), lambda g: (g / xd,), "log")


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.shape[axis] < 2:
        raise ShapeError(f"softmax needs at least 2 classes along axis {axis}, got {logits.shape}")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result(y, (logits,), fn, "softmax")


# shape manipulation -------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape

    def fn(g):
        full = np.zeros(src, dtype=g.dtype)
        if _is_fancy(index):
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _result(x.data[index], (x,), fn, "getitem")


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def fn(g):
        return tuple(
            np.take(g, range(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors))
        )

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(data, tuple(tensors), fn, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    src = x.shape

    def fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), fn, "sum")


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# dense layers ------------------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``y = x @ weight.T + bias`` for ``x`` of shape (N, D_in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def fn(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "linear")


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"conv2d: input size {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """2-D cross-correlation of an (N, C_in, H, W) batch via im2col."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {kh}x{kw}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"conv2d: invalid stride {stride} / padding {padding}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} output channels")
    ho = _conv_out(h, kh, stride, padding)
    wo = _conv_out(w, kw, stride, padding)
    xd = x.data
    wm = weight.data.reshape(c_out, -1)

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = xd.transpose(0, 2, 3, 1).reshape(-1, c)
        pointwise = True
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = np.empty((n, ho, wo, c, kh, kw), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[..., i, j] = xp[
                    :, :, i : i + stride * ho : stride, j : j + stride * wo : stride
                ].transpose(0, 2, 3, 1)
        cols = cols.reshape(n * ho * wo, c * kh * kw)
        pointwise = False

    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2)

    def fn(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(weight.shape)
        dcols = g2 @ wm
        if pointwise:
            dx = dcols.reshape(n, ho, wo, c).transpose(0, 3, 1, 2)
        else:
            dcols = dcols.reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        ..., i, j
                    ].transpose(0, 3, 1, 2)
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, fn, "conv2d")


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping ``size`` x ``size`` mean pooling of an (N, C, H, W) batch."""
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ConfigurationError(f"avg_pool2d: {h}x{w} is not divisible by {size}")
    out = x.data.reshape(n, c, h // size, size, w // size, size).mean(axis=(3, 5))
    scale = 1.0 / (size * size)

    def fn(g):
        return (np.repeat(np.repeat(g * scale, size, axis=2), size, axis=3),)

    return _result(out, (x,), fn, "avg_pool2d")


def bilinear_matrix(n_in: int, n_out: int, dtype=np.float64, align_corners: bool = True) -> np.ndarray:
    """Linear interpolation matrix of shape (n_out, n_in).

    ``align_corners`` maps the first/last samples onto each other; otherwise
    pixel centers are aligned (half-pixel convention, edges clamped).
    """
    a = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1 or (align_corners and n_out == 1):
        a[:, 0] = 1.0
        return a
    for i in range(n_out):
        if align_corners:
            src = i * (n_in - 1) / (n_out - 1)
        else:
            src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)
        i0 = min(int(math.floor(src)), n_in - 1)
        frac = src - i0
        a[i, i0] += 1.0 - frac
        if frac > 0:
            a[i, i0 + 1] += frac
    return a


def upsample_bilinear(x: Tensor, out_h: int, out_w: int, align_corners: bool = True) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"upsample_bilinear: output size must be positive, got {out_h}x{out_w}")
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear expects (N, C, H, W), got {x.shape}")
    ah = bilinear_matrix(x.shape[2], out_h, x.dtype, align_corners)
    aw = bilinear_matrix(x.shape[3], out_w, x.dtype, align_corners)
    out = ah @ x.data @ aw.T
    return _result(out, (x,), lambda g: (ah.T @ g @ aw,), "upsample_bilinear")


# losses ------------------------------------------------------------------------

_PROB_FLOOR = 1e-12


def cross_entropy(
    pred: Tensor, target, axis: int = 1, from_logits: bool = False
) -> Tensor:
    """Mean negative log-likelihood of ``target`` class indices.

    ``pred`` holds probabilities (or logits when ``from_logits``) with the
    class dimension at ``axis``; ``target`` has ``pred``'s shape minus that axis.
    """
    target = np.asarray(target)
    axis = axis % pred.ndim
    n_cls = pred.shape[axis]
    expected = pred.shape[:axis] + pred.shape[axis + 1 :]
    if target.shape != expected:
        raise ShapeError(f"cross_entropy: target shape {target.shape} != {expected}")
    if target.size and (target.min() < 0 or target.max() >= n_cls):
        raise ValueError(f"cross_entropy: target indices must lie in [0, {n_cls})")
    idx = np.expand_dims(target.astype(np.intp), axis)
    count = target.size
    pd = pred.data

    if from_logits:
        shifted = pd - pd.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        logp = shifted - lse
        picked = np.take_along_axis(logp, idx, axis=axis)
        loss = -picked.sum() / count

        def fn(g):
            grad = np.exp(logp)
            np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=axis) - 1.0, axis=axis)
            return (grad * (g / count),)

    else:
        picked = np.take_along_axis(pd, idx, axis=axis)
        safe = np.maximum(picked, _PROB_FLOOR)
        loss = -np.log(safe).sum() / count

        def fn(g):
            grad = np.zeros_like(pd)
            local = np.where(picked > _PROB_FLOOR, -1.0 / safe, 0.0).astype(pd.dtype)
            np.put_along_axis(grad, idx, local * (g / count), axis=axis)
            return (grad,)

    return _result(np.asarray(loss, dtype=pd.dtype), (pred,), fn, "cross_entropy")


# reverse pass ------------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that need gradients, inputs before outputs."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: Optional[Iterable[Tensor]] = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Parameters listed in ``params`` that the loss does not reach get a zero
    gradient.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any tensor requiring grad")
    order = topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


# optimisation ------------------------------------------------------------------


def poly_lr(iteration: int, max_iterations: int, base_lr: float, power: float = 0.9) -> float:
    if not 0 <= iteration <= max_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {max_iterations}]")
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    if max_iterations == 0:
        return base_lr
    return base_lr * (1.0 - iteration / max_iterations) ** power


class SGD:
    """Stochastic gradient descent with optional heavy-ball momentum and L2 decay."""

    def __init__(self, params: Iterable[Parameter], momentum: float = 0.0, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity: dict[int, np.ndarray] = {}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if self.momentum:
                v = self._velocity.get(id(p))
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[id(p)] = v
                g = v
            p.data -= (lr * g).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params: Iterable[Parameter], learning_rate: float) -> None:
    """Plain SGD update ``value -= lr * grad``; clears gradients afterwards."""
    for p in params:
        if p.grad is not None:
            p.data -= (learning_rate * p.grad).astype(p.data.dtype)
        p.grad = None


def he_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype=np.float64) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
