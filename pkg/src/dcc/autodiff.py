"""Dense reverse-mode autodiff whose backward pass is itself differentiable.

Values are plain numpy arrays wrapped in :class:`Var`. Every op records a
backward rule written in terms of other ops from this module, so running
:func:`grad` with ``create_graph=True`` yields tracked gradients that can be
differentiated again. This is what the gradient-matching losses need: the
distance between two parameter gradients is differentiated with respect to
the synthetic pixels.

Implicit broadcasting is limited to scalar-vs-tensor. Anything else goes
through the explicit :func:`broadcast_to` and :func:`sum` ops.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def set_grad_enabled(flag: bool):
    prev = is_grad_enabled()
    _state.enabled = bool(flag)
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    return set_grad_enabled(False)


class _Node:
    __slots__ = ("parents", "backward", "op")

    def __init__(self, op, parents, backward):
        self.op = op
        self.parents = parents
        self.backward = backward


def _as_float_array(value, dtype=None) -> np.ndarray:
    arr = np.asarray(value)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Var:
    """An array value, optionally tracked on a differentiation graph."""

    __slots__ = ("value", "requires_grad", "_node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(value, Var):
            value = value.value
        self.value = _as_float_array(value, dtype)
        self.requires_grad = bool(requires_grad)
        self._node = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    def detach(self) -> "Var":
        return Var(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else _bad_item(self)

    def __repr__(self):
        tag = ", tracked" if self.requires_grad else ""
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype}{tag})"

    def __len__(self):
        return self.value.shape[0]

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _bad_item(v):
    raise ValueError(f"item() needs a single-element Var, got shape {v.shape}")


def constant(value, like: Var | None = None) -> Var:
    """Wrap a number or array as an untracked Var, matching ``like``'s dtype."""
    if isinstance(value, Var):
        return value
    dtype = like.value.dtype if like is not None else None
    return Var(value, dtype=dtype)


def _make(op: str, value, parents: tuple, backward: Callable) -> Var:
    out = Var(value)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(op, parents, backward)
    return out


def _is_scalar(v: Var) -> bool:
    return v.value.ndim == 0 or v.value.size == 1


def _check_binary(a: Var, b: Var, op: str):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible "
                     "(only exact match or scalar broadcast is supported)")


def _reduce_to(g: Var, target: Var) -> Var:
    """Undo a scalar broadcast in a backward pass."""
    if g.shape == target.shape:
        return g
    return reshape(sum(g), target.shape)


def _coerce(a, b):
    if not isinstance(a, Var) and not isinstance(b, Var):
        raise TypeError("at least one operand must be a Var")
    if not isinstance(a, Var):
        a = constant(a, b)
    if not isinstance(b, Var):
        b = constant(b, a)
    return a, b


# elementwise -----------------------------------------------------------------

def add(a, b) -> Var:
    a, b = _coerce(a, b)
    _check_binary(a, b, "add")

    def backward(g, out):
        return _reduce_to(g, a), _reduce_to(g, b)

    return _make("add", a.value + b.value, (a, b), backward)


def sub(a, b) -> Var:
    a, b = _coerce(a, b)
    _check_binary(a, b, "sub")

    def backward(g, out):
        return _reduce_to(g, a), _reduce_to(neg(g), b)

    return _make("sub", a.value - b.value, (a, b), backward)


def mul(a, b) -> Var:
    a, b = _coerce(a, b)
    _check_binary(a, b, "mul")

    def backward(g, out):
        ga = _reduce_to(mul(g, b), a) if a.requires_grad else None
        gb = _reduce_to(mul(g, a), b) if b.requires_grad else None
        return ga, gb

    return _make("mul", a.value * b.value, (a, b), backward)


def div(a, b) -> Var:
    a, b = _coerce(a, b)
    _check_binary(a, b, "div")

    def backward(g, out):
        ga = _reduce_to(div(g, b), a) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _reduce_to(neg(div(mul(g, a), mul(b, b))), b)
        return ga, gb

    return _make("div", a.value / b.value, (a, b), backward)


def neg(a: Var) -> Var:
    return _make("neg", -a.value, (a,), lambda g, out: (neg(g),))


def scale(a: Var, c: float) -> Var:
    """Multiply by a Python constant."""
    c = float(c)
    return _make("scale", a.value * a.value.dtype.type(c), (a,), lambda g, out: (scale(g, c),))


def square(a: Var) -> Var:
    return _make("square", a.value * a.value, (a,), lambda g, out: (mul(g, scale(a, 2.0)),))


def power(a: Var, p: float) -> Var:
    p = float(p)
    if p == 2.0:
        return square(a)
    if np.any(a.value < 0) and not p.is_integer():
        raise ValueError("power: negative base with non-integer exponent")

    def backward(g, out):
        return (mul(g, scale(power(a, p - 1.0), p)),)

    return _make("power", a.value ** p, (a,), backward)


def exp(a: Var) -> Var:
    return _make("exp", np.exp(a.value), (a,), lambda g, out: (mul(g, out),))


def log(a: Var) -> Var:
    if np.any(a.value <= 0):
        raise ValueError("log: input must be strictly positive")
    return _make("log", np.log(a.value), (a,), lambda g, out: (div(g, a),))


def sqrt(a: Var) -> Var:
    """Square root; the derivative at exactly 0 is taken to be 0."""
    if np.any(a.value < 0):
        raise ValueError("sqrt: input must be non-negative")
    value = np.sqrt(a.value)

    def backward(g, out):
        dead = out.value == 0
        if not dead.any():
            return (div(scale(g, 0.5), out),)
        live = constant((~dead).astype(out.value.dtype), out)
        safe = add(out, constant(dead.astype(out.value.dtype), out))
        return (mul(div(scale(g, 0.5), safe), live),)

    return _make("sqrt", value, (a,), backward)


def relu(a: Var) -> Var:
    mask = (a.value > 0).astype(a.value.dtype)

    def backward(g, out):
        return (mul(g, constant(mask, g)),)

    return _make("relu", a.value * mask, (a,), backward)


def masked(a: Var, mask) -> Var:
    """Multiply by a constant 0/1 (or any fixed) array of the same shape."""
    return mul(a, constant(np.asarray(mask, dtype=a.value.dtype), a))


# reductions and shape ops ----------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a: Var, axis=None, keepdims: bool = False) -> Var:  # noqa: A001 - mirrors numpy
    axes = _norm_axis(axis, a.ndim)
    value = np.sum(a.value, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))
    in_shape = a.shape

    def backward(g, out):
        return (broadcast_to(reshape(g, kept), in_shape),)

    return _make("sum", value, (a,), backward)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum(a, axes, keepdims), 1.0 / count)


def broadcast_to(a: Var, shape) -> Var:
    """Explicit broadcast of size-1 axes (ndim must already agree, or a is scalar)."""
    shape = tuple(shape)
    if a.shape == shape:
        return a
    src = a.shape
    if a.ndim != len(shape):
        if a.size != 1:
            raise ValueError(f"broadcast_to: cannot broadcast {src} to {shape}")
        a = reshape(a, (1,) * len(shape))
    axes = tuple(i for i, (m, n) in enumerate(zip(a.shape, shape)) if m != n)
    if any(a.shape[i] != 1 for i in axes):
        raise ValueError(f"broadcast_to: cannot broadcast {src} to {shape}")
    base = a

    def backward(g, out):
        return (sum(g, axes, keepdims=True),)

    return _make("broadcast_to", np.broadcast_to(base.value, shape).copy(), (base,), backward)


def reshape(a: Var, shape) -> Var:
    shape = tuple(int(s) for s in shape)
    src = a.shape
    return _make("reshape", a.value.reshape(shape), (a,), lambda g, out: (reshape(g, src),))


def flatten(a: Var) -> Var:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Var, axes=None) -> Var:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", np.transpose(a.value, axes), (a,),
                 lambda g, out: (transpose(g, inv),))


def take(a: Var, index, axis: int = 0) -> Var:
    """Gather along ``axis`` with an integer index array."""
    index = np.asarray(index, dtype=np.intp)
    n = a.shape[axis]

    def backward(g, out):
        return (index_add(g, index, n, axis),)

    return _make("take", np.take(a.value, index, axis=axis), (a,), backward)


def index_add(g: Var, index, size: int, axis: int = 0) -> Var:
    """Adjoint of :func:`take`: scatter-add rows of ``g`` into a zero tensor."""
    index = np.asarray(index, dtype=np.intp)
    moved = np.moveaxis(g.value, axis, 0)
    buf = np.zeros((size,) + moved.shape[1:], dtype=g.value.dtype)
    np.add.at(buf, index, moved)
    value = np.moveaxis(buf, 0, axis)

    def backward(gg, out):
        return (take(gg, index, axis),)

    return _make("index_add", value, (g,), backward)


def concat(parts: Sequence[Var], axis: int = 0) -> Var:
    parts = [p if isinstance(p, Var) else constant(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, out):
        return tuple(take(g, np.arange(offsets[i], offsets[i + 1]), axis)
                     for i in range(len(parts)))

    return _make("concat", np.concatenate([p.value for p in parts], axis=axis),
                 tuple(parts), backward)


# linear algebra and image ops ----------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    a, b = _coerce(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ ({a.shape} @ {b.shape})")

    def backward(g, out):
        ga = matmul(g, transpose(b)) if a.requires_grad else None
        gb = matmul(transpose(a), g) if b.requires_grad else None
        return ga, gb

    return _make("matmul", a.value @ b.value, (a, b), backward)


def _conv_dims(x_shape, w_shape, pad):
    N, C, H, W = x_shape
    F, Cw, k, k2 = w_shape
    if Cw != C or k != k2:
        raise ValueError(f"conv2d: kernel {w_shape} incompatible with input {x_shape}")
    if k > H + 2 * pad or k > W + 2 * pad:
        raise ValueError(f"conv2d: kernel {k}x{k} larger than padded input {H}x{W} (pad={pad})")
    return N, C, H, W, F, k, H + 2 * pad - k + 1, W + 2 * pad - k + 1


# im2col of the same input is needed again by the weight gradient and by
# double-backward, so the last few results are kept per thread, keyed by
# array identity. This relies on value arrays never being mutated in place.
_COLS_CACHE_SIZE = 8


def _cols(x, k, pad):
    cache = getattr(_state, "cols", None)
    if cache is None:
        cache = _state.cols = []
    for ref, kk, pp, cols in cache:
        if ref is x and kk == k and pp == pad:
            return cols
    cols = kernels.im2col(x, k, pad)  # N, Ho, Wo, C, k, k
    cache.append((x, k, pad, cols))
    if len(cache) > _COLS_CACHE_SIZE:
        cache.pop(0)
    return cols


def _conv_fwd(x, w, pad):
    k = w.shape[2]
    cols = _cols(x, k, pad)
    out = np.tensordot(cols, w, axes=([3, 4, 5], [1, 2, 3]))  # N, Ho, Wo, F
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_dx(g, w, in_hw, pad):
    cols = np.tensordot(g.transpose(0, 2, 3, 1), w, axes=([3], [0]))  # N, Ho, Wo, C, k, k
    return kernels.col2im(np.ascontiguousarray(cols), in_hw[0], in_hw[1], pad)


def _conv_dw(x, g, k, pad):
    cols = _cols(x, k, pad)
    return np.tensordot(g, cols, axes=([0, 2, 3], [0, 1, 2]))  # F, C, k, k


def conv2d(x: Var, w: Var, padding: int = 0) -> Var:
    """Stride-1 cross-correlation (no kernel flip) with zero padding."""
    _conv_dims(x.shape, w.shape, padding)
    return _conv_op(x, w, padding)


def _conv_op(x, w, pad):
    in_hw = x.shape[2:]
    k = w.shape[2]

    def backward(g, out):
        gx = conv2d_input_grad(g, w, in_hw, pad) if x.requires_grad else None
        gw = conv2d_weight_grad(x, g, k, pad) if w.requires_grad else None
        return gx, gw

    return _make("conv2d", _conv_fwd(x.value, w.value, pad), (x, w), backward)


def conv2d_input_grad(g: Var, w: Var, in_hw, pad: int) -> Var:
    """Adjoint of ``x -> conv2d(x, w)`` applied to ``g``."""
    k = w.shape[2]

    def backward(gg, out):
        d_g = _conv_op(gg, w, pad) if g.requires_grad else None
        d_w = conv2d_weight_grad(gg, g, k, pad) if w.requires_grad else None
        return d_g, d_w

    return _make("conv2d_input_grad", _conv_dx(g.value, w.value, in_hw, pad), (g, w), backward)


def conv2d_weight_grad(x: Var, g: Var, k: int, pad: int) -> Var:
    """Adjoint of ``w -> conv2d(x, w)`` applied to ``g``."""
    in_hw = x.shape[2:]

    def backward(gg, out):
        d_x = conv2d_input_grad(g, gg, in_hw, pad) if x.requires_grad else None
        d_g = _conv_op(x, gg, pad) if g.requires_grad else None
        return d_x, d_g

    return _make("conv2d_weight_grad", _conv_dw(x.value, g.value, k, pad), (x, g), backward)


def avgpool2d(x: Var, window: int) -> Var:
    N, C, H, W = x.shape
    if H % window or W % window:
        raise ValueError(f"avgpool2d: spatial dims {H}x{W} not divisible by window {window}")
    value = x.value.reshape(N, C, H // window, window, W // window, window).mean(axis=(3, 5))
    return _make("avgpool2d", value, (x,), lambda g, out: (_unpool(g, window),))


def _unpool(g: Var, window: int) -> Var:
    """Adjoint of :func:`avgpool2d`: spread g / window**2 over each window."""
    v = np.repeat(np.repeat(g.value, window, axis=2), window, axis=3)
    v = v * v.dtype.type(1.0 / (window * window))
    return _make("unpool", v, (g,), lambda gg, out: (avgpool2d(gg, window),))


def resample_hw(x: Var, Ah: np.ndarray, Aw: np.ndarray) -> Var:
    """Apply fixed linear maps on the spatial axes: ``Ah @ x[n, c] @ Aw.T``.

    Flips, integer shifts and bilinear rescaling are all of this form.
    """
    Ah = np.asarray(Ah, dtype=x.value.dtype)
    Aw = np.asarray(Aw, dtype=x.value.dtype)
    value = Ah @ x.value @ Aw.T

    def backward(g, out):
        return (resample_hw(g, Ah.T, Aw.T),)

    return _make("resample_hw", value, (x,), backward)


# norms and losses ------------------------------------------------------------

def instance_norm(x: Var, eps: float = 1e-5) -> Var:
    """Per-sample, per-channel standardisation over H*W (no affine)."""
    N, C, H, W = x.shape
    if H * W < 2:
        raise ValueError("instance_norm needs at least two spatial positions")
    xr = reshape(x, (N, C, H * W))
    mu = broadcast_to(mean(xr, axis=2, keepdims=True), xr.shape)
    xc = sub(xr, mu)
    var = mean(square(xc), axis=2, keepdims=True)
    denom = broadcast_to(sqrt(add(var, eps)), xr.shape)
    return reshape(div(xc, denom), x.shape)


def log_softmax(logits: Var) -> Var:
    shift = constant(logits.value.max(axis=1, keepdims=True), logits)
    z = sub(logits, broadcast_to(shift, logits.shape))
    lse = log(sum(exp(z), axis=1, keepdims=True))
    return sub(z, broadcast_to(lse, logits.shape))


def _check_labels(labels, n, C):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise ValueError(f"labels must lie in [0, {C}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def cross_entropy(logits: Var, labels, reduction: str = "mean") -> Var:
    N, C = logits.shape
    labels = _check_labels(labels, N, C)
    onehot = np.zeros((N, C), dtype=logits.value.dtype)
    onehot[np.arange(N), labels] = 1.0
    picked = neg(sum(masked(log_softmax(logits), onehot), axis=1))
    if reduction == "none":
        return picked
    if reduction == "sum":
        return sum(picked)
    return mean(picked)


def hinge(score: Var, y, reduction: str = "mean") -> Var:
    """``max(0, 1 - y * score)`` with labels in {-1, +1}; subgradient 0 at the kink."""
    if score.ndim == 2 and score.shape[1] == 1:
        score = reshape(score, (score.shape[0],))
    y = np.asarray(y, dtype=score.value.dtype).reshape(score.shape)
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValueError("hinge labels must be -1 or +1")
    per = relu(sub(1.0, mul(score, constant(y, score))))
    if reduction == "none":
        return per
    return mean(per)


def l2norm(a: Var) -> Var:
    return sqrt(sum(square(a)))


# differentiation -------------------------------------------------------------

def _topo(output: Var):
    order, seen = [], set()
    stack = [(output, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        if v._node is not None:
            for p in v._node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def grad(output: Var, inputs: Sequence[Var], create_graph: bool = False):
    """Reverse-mode gradients of a scalar ``output`` with respect to ``inputs``.

    Inputs that do not influence ``output`` get zero gradients. With
    ``create_graph`` the results are tracked Vars; otherwise plain arrays.
    """
    if not isinstance(output, Var) or output.size != 1:
        raise ValueError("grad: output must be a single-element Var")
    if not output.requires_grad:
        raise ValueError("grad: output is not tracked (no input requires grad)")
    inputs = list(inputs)
    wanted = {id(v): i for i, v in enumerate(inputs)}
    results: list = [None] * len(inputs)
    order = _topo(output)
    grads = {id(output): Var(np.ones_like(output.value))}
    with set_grad_enabled(create_graph):
        for v in reversed(order):
            g = grads.pop(id(v), None)
            if g is None:
                continue
            if id(v) in wanted:
                results[wanted[id(v)]] = g
            node = v._node
            if node is None:
                continue
            for p, pg in zip(node.parents, node.backward(g, v)):
                if pg is None or not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    out = []
    for v, g in zip(inputs, results):
        if g is None:
            g = Var(np.zeros_like(v.value))
        out.append(g if create_graph else g.value)
    return out
