"""Dense tensors with reverse-mode automatic differentiation.

The graph is dynamic: each produced tensor remembers its parents and a
closure computing parent gradients. ``backward`` walks the graph in reverse
topological order. Tensors are immutable once produced (training code never
mutates ``data`` of a graph node; optimizers write only to leaf parameters
between steps).

Float width follows the input arrays: float32 for training, float64 for
gradient-verification tests.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .backend import kernels


class ShapeError(ValueError):
    pass


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self.name = name

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    # -- operator sugar ------------------------------------------------
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

    def reshape(self, *shape):
        return reshape(self, shape)

    def sum(self):
        return tsum(self)

    def mean(self, axes=None, keepdims=False):
        return tmean(self, axes, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype)
    return Tensor(arr)


def param(data, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce gradient g back to the operand's shape after broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible"
        ) from None


# -- elementwise ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def elementwise(op_kind: str, a, b) -> Tensor:
    """Named elementwise dispatch: 'add', 'sub', or 'mul'."""
    ops = {"add": add, "sub": sub, "mul": mul}
    if op_kind not in ops:
        raise ValueError(f"unknown elementwise op {op_kind!r}")
    return ops[op_kind](a, b)


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    y = np.maximum(a.data, 0)
    return _make(y, (a,), lambda g: (g * (a.data > 0),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    y = a.data * sig
    return _make(y, (a,), lambda g: (g * (sig * (1.0 + a.data * (1.0 - sig))),))


def tabs(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    y = np.sqrt(a.data)
    return _make(y, (a,), lambda g: (g * 0.5 / np.maximum(y, np.finfo(y.dtype).tiny),))


def where_mask(mask: np.ndarray, a, b) -> Tensor:
    """mask==1 selects a, mask==0 selects b. Selection is bit-exact.

    The mask is a plain binary array, never differentiated through.
    """
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask)
    sel = m != 0
    y = np.where(sel, np.broadcast_to(a.data, np.broadcast_shapes(a.shape, m.shape)),
                 np.broadcast_to(b.data, np.broadcast_shapes(b.shape, m.shape)))
    return _make(
        y,
        (a, b),
        lambda g: (
            _unbroadcast(np.where(sel, g, 0.0), a.shape),
            _unbroadcast(np.where(sel, 0.0, g), b.shape),
        ),
    )


# -- reductions and reshapes ------------------------------------------


def tsum(a) -> Tensor:
    a = as_tensor(a)
    return _make(
        np.asarray(a.data.sum()),
        (a,),
        lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),),
    )


def tmean(a, axes=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = a.data.mean(axis=axes, keepdims=keepdims)
    count = a.data.size if axes is None else np.prod([a.shape[i] for i in np.atleast_1d(axes)])

    def back(g):
        gg = np.asarray(g)
        if axes is not None and not keepdims:
            gg = np.expand_dims(gg, tuple(np.atleast_1d(axes)))
        return (np.broadcast_to(gg, a.shape).astype(a.dtype, copy=False) / count,)

    return _make(np.asarray(y), (a,), back)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat_channels(parts) -> Tensor:
    """Concatenate (N,C,H,W) tensors along the channel axis."""
    parts = [as_tensor(p) for p in parts]
    splits = np.cumsum([p.shape[1] for p in parts])[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=1))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), back)


# -- linear algebra ---------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(
        a.data @ b.data,
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def linear(x, w, b=None) -> Tensor:
    """x (N,I) @ w (I,O) + b (O,)."""
    y = matmul(x, w)
    if b is not None:
        y = add(y, b)
    return y


# -- convolution and resampling ---------------------------------------


def conv2d(x, w, stride: int = 1, pad: int = 1) -> Tensor:
    """x (N,C,H,W) * w (O,C,kh,kw), zero padding, square stride."""
    x, w = as_tensor(x), as_tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    fwd, bwd_in, bwd_w = kernels()
    if pad:
        xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    else:
        xp = x.data
    y = fwd(xp, w.data, stride)
    hp, wp = xp.shape[2], xp.shape[3]
    kh, kw = w.shape[2], w.shape[3]

    def back(g):
        g = np.ascontiguousarray(g)
        gxp = bwd_in(g, w.data, stride, hp, wp)
        if pad:
            gx = gxp[:, :, pad:-pad, pad:-pad]
        else:
            gx = gxp
        gw = bwd_w(xp, g, stride, kh, kw)
        return (gx, gw)

    return _make(y, (x, w), back)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def back(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(y, (x,), back)


# -- classification head ----------------------------------------------


def softmax_cross_entropy(logits, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy of (N,K) logits against integer labels (N,)."""
    logits = as_tensor(logits)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    p = ez / ez.sum(axis=1, keepdims=True)
    n = z.shape[0]
    idx = (np.arange(n), np.asarray(labels))
    loss = -np.log(np.maximum(p[idx], np.finfo(p.dtype).tiny)).mean()

    def back(g):
        gp = p.copy()
        gp[idx] -= 1.0
        return (g * gp / n,)

    return _make(np.asarray(loss, dtype=z.dtype), (logits,), back)


# -- backward pass ----------------------------------------------------


def backward(loss: Tensor, params=None) -> dict:
    """Reverse-mode gradients of a scalar loss.

    Populates ``.grad`` on every reachable tensor with ``requires_grad``.
    When ``params`` (an iterable of leaf tensors) is given, returns a dict
    mapping each to its gradient array, zeros if the loss does not depend
    on it.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data, dtype=loss.dtype)
    }
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if not p.requires_grad:
                continue
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg

    if params is None:
        return {}
    out = {}
    for p in params:
        out[id(p)] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def collect_grads(params: dict) -> dict:
    """name -> gradient array for a dict of leaf parameters (zeros if unset)."""
    return {
        k: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for k, p in params.items()
    }


def clear_grads(params) -> None:
    it = params.values() if isinstance(params, dict) else params
    for p in it:
        p.grad = None
