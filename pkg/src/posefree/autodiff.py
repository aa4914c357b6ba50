"""Dense numpy arrays with tape-based reverse-mode differentiation.

Every operation whose inputs require gradients appends a node to the active
:class:`Tape`.  :func:`backward` walks that tape in reverse recording order,
so gradient accumulation order is fixed by the order the forward pass ran.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "Tape", "OffTapeError", "tensor", "backward", "grad_check",
    "no_grad", "current_tape", "matmul", "add", "sub", "mul", "div", "exp",
    "log", "sqrt", "sum", "mean", "reshape", "transpose", "concat", "stack",
    "softmax", "logsumexp", "layer_norm", "gelu", "relu", "sigmoid",
    "softplus", "maximum", "where", "cumsum", "grid_sample",
]


class OffTapeError(RuntimeError):
    """Raised when backward is asked for a loss that is not on the active tape."""


class Node:
    __slots__ = ("tape", "parents", "backward")

    def __init__(self, tape, parents, backward):
        self.tape = tape
        self.parents = parents
        self.backward = backward


class Tape:
    """Ordered record of differentiable operations.

    Usable as a context manager to scope recording::

        with Tape():
            loss = f(x)
            grads = backward(loss)
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        _state().tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state().tapes.remove(self)
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


class _State(threading.local):
    def __init__(self):
        self.tapes = [Tape()]
        self.grad_enabled = True


_STATE = _State()


def _state() -> _State:
    return _STATE


def current_tape() -> Tape:
    return _state().tapes[-1]


@contextlib.contextmanager
def no_grad():
    st = _state()
    prev = st.grad_enabled
    st.grad_enabled = False
    try:
        yield
    finally:
        st.grad_enabled = prev


class Tensor:
    """An ndarray plus the bookkeeping needed to differentiate through it.

    Equality and hashing are by identity so tensors can key gradient maps.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    # -- basic properties ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ------------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, k):
        return power(self, k)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms -----------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def tensor(data, requires_grad=False, dtype=None, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    b = _as_tensor(b)
    return _as_tensor(a, b), b


def _make(data, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _state().grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape = current_tape()
        out.node = Node(tape, tuple(parents), backward_fn)
        tape.nodes.append(out.node)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(opname, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{opname}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("add", a, b)
    return _make(a.data + b.data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("sub", a, b)
    return _make(a.data - b.data, (a, b), lambda g: (
        _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("mul", a, b)
    return _make(a.data * b.data, (a, b), lambda g: (
        _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(g * a.data, b.shape) if b.requires_grad else None))


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (
        _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
        _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None))


def power(a, k: float) -> Tensor:
    a = _as_tensor(a)
    k = float(k)
    return _make(a.data ** k, (a,), lambda g: (g * k * a.data ** (k - 1.0),))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    out = special.expit(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)
    return _make(out, (a,), lambda g: (g * special.expit(x),))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + special.erf(x * _INV_SQRT2))
    return _make(x * cdf, (a,), lambda g: (
        g * (cdf + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)),))


def maximum(a, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient is zero where clamped."""
    a = _as_tensor(a)
    mask = a.data > floor
    return _make(np.where(mask, a.data, floor).astype(a.dtype), (a,),
                 lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    a, b = _pair(a, b)
    cond = np.asarray(cond, dtype=bool)
    return _make(np.where(cond, a.data, b.data), (a, b), lambda g: (
        _unbroadcast(np.where(cond, g, 0.0), a.shape),
        _unbroadcast(np.where(cond, 0.0, g), b.shape)))


# ---------------------------------------------------------------------------
# linear algebra, reductions, shape manipulation
# ---------------------------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: operands need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError:
        raise ValueError(f"matmul: batch shapes {a.shape} and {b.shape} do not broadcast") from None

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    a = _as_tensor(a)
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=True),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _as_tensor(a)
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = np.argsort(axes)
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def getitem(a, idx) -> Tensor:
    a = _as_tensor(a)
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.intp)
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(out, copy=True), (a,), bw)


def cumsum(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    out = np.cumsum(a.data, axis=axis, dtype=np.float64).astype(a.dtype)

    def bw(g):
        r = np.flip(np.cumsum(np.flip(g, axis), axis=axis, dtype=np.float64), axis)
        return (r.astype(g.dtype),)

    return _make(out, (a,), bw)


def softmax(a, axis=-1) -> Tensor:
    a = _as_tensor(a)
    x = a.data.astype(np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = (e / e.sum(axis=axis, keepdims=True)).astype(a.dtype)

    def bw(g):
        s = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64)
        return ((y * (g - s)).astype(a.dtype),)

    return _make(y, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False) -> Tensor:
    """Max-shifted log-sum-exp; entries equal to -inf contribute nothing."""
    a = _as_tensor(a)
    x = a.data.astype(np.float64)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
    out_k = m + np.log(s)
    w = np.exp(x - out_k)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return ((g * w).astype(a.dtype),)

    return _make(out.astype(a.dtype), (a,), bw)


def layer_norm(a, weight=None, bias=None, eps=1e-9) -> Tensor:
    """Normalize over the last axis, then apply the optional affine terms.

    Statistics are accumulated in float64 regardless of storage dtype.
    """
    a = _as_tensor(a)
    x = a.data.astype(np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(a.dtype)

    def bw(g):
        g64 = g.astype(np.float64)
        xh = xc * inv
        gx = inv * (g64 - g64.mean(axis=-1, keepdims=True)
                    - xh * (g64 * xh).mean(axis=-1, keepdims=True))
        return (gx.astype(a.dtype),)

    out = _make(xhat, (a,), bw)
    if weight is not None:
        out = mul(out, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------
def grid_sample(plane, coords) -> Tensor:
    """Bilinearly sample an (H, W, C) plane at (P, 2) normalized coordinates.

    ``coords[:, 0]`` runs along W and ``coords[:, 1]`` along H; -1 and +1 map
    onto the first and last grid nodes.  Queries outside are clamped to the
    edge, which also zeroes the coordinate gradient there.
    """
    plane = _as_tensor(plane)
    coords = _as_tensor(coords, plane)
    H, W, C = plane.shape
    xy = coords.data
    gx = (xy[:, 0] + 1.0) * 0.5 * (W - 1)
    gy = (xy[:, 1] + 1.0) * 0.5 * (H - 1)
    inside_x = (gx >= 0) & (gx <= W - 1)
    inside_y = (gy >= 0) & (gy <= H - 1)
    gx = np.clip(gx, 0, W - 1)
    gy = np.clip(gy, 0, H - 1)
    x0 = np.minimum(np.floor(gx).astype(np.intp), max(W - 2, 0))
    y0 = np.minimum(np.floor(gy).astype(np.intp), max(H - 2, 0))
    x1 = np.minimum(x0 + 1, W - 1)
    y1 = np.minimum(y0 + 1, H - 1)
    fx = (gx - x0)[:, None].astype(plane.dtype)
    fy = (gy - y0)[:, None].astype(plane.dtype)
    flat = plane.data.reshape(H * W, C)
    i00, i01, i10, i11 = y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1
    v00, v01, v10, v11 = flat[i00], flat[i01], flat[i10], flat[i11]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def bw(g):
        gplane = gcoord = None
        if plane.requires_grad:
            idx = np.stack([i00, i01, i10, i11], axis=1)  # (P, 4)
            wts = np.concatenate([w00, w01, w10, w11], axis=1)  # (P, 4)
            lin = (idx[:, :, None] * C + np.arange(C)).reshape(-1)
            vals = (wts[:, :, None] * g[:, None, :]).reshape(-1)
            gplane = np.bincount(lin, weights=vals, minlength=H * W * C)
            gplane = gplane.reshape(H, W, C).astype(plane.dtype)
        if coords.requires_grad:
            dfx = ((v01 - v00) * (1 - fy) + (v11 - v10) * fy)
            dfy = ((v10 - v00) * (1 - fx) + (v11 - v01) * fx)
            cx = np.sum(g * dfx, axis=1) * 0.5 * (W - 1) * inside_x
            cy = np.sum(g * dfy, axis=1) * 0.5 * (H - 1) * inside_y
            gcoord = np.stack([cx, cy], axis=1).astype(coords.dtype)
        return gplane, gcoord

    return _make(out, (plane, coords), bw)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------
def backward(loss: Tensor, wrt=None, retain_tape=False) -> dict:
    """Return ``{leaf: d loss / d leaf}`` for every leaf the loss depends on.

    Leaves listed in ``wrt`` that the loss does not reach get zero arrays.
    The tape is cleared afterwards unless ``retain_tape`` is set.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward: loss must be a Tensor")
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads: dict = {}
    if loss.requires_grad and loss.node is None:
        grads[loss] = np.ones_like(loss.data)
    elif loss.requires_grad:
        node = loss.node
        tape = node.tape
        if tape is not current_tape():
            raise OffTapeError("backward: loss was recorded on a tape that is not active")
        try:
            end = len(tape.nodes) - 1 - tape.nodes[::-1].index(node)
        except ValueError:
            raise OffTapeError("backward: loss is no longer on the tape (already consumed?)") from None
        pending = {node: np.ones_like(loss.data)}
        for n in reversed(tape.nodes[:end + 1]):
            g = pending.pop(n, None)
            if g is None:
                continue
            for p, pg in zip(n.parents, n.backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p.node is None:
                    prev = grads.get(p)
                    grads[p] = pg.copy() if prev is None else prev + pg
                else:
                    prev = pending.get(p.node)
                    pending[p.node] = pg if prev is None else prev + pg
        if not retain_tape:
            tape.clear()
    for leaf, g in grads.items():
        leaf.grad = g
    if wrt is not None:
        for leaf in wrt:
            if leaf not in grads:
                grads[leaf] = np.zeros_like(leaf.data)
                leaf.grad = grads[leaf]
    return grads


def grad_check(f, x, step=1e-5) -> float:
    """Compare backward against central differences at ``x``.

    Returns max |analytic - numeric| / max(1, |numeric|) over coordinates.
    ``f`` maps a Tensor to a scalar Tensor.
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with Tape():
        xt = Tensor(base.copy(), requires_grad=True)
        out = f(xt)
        analytic = backward(out, wrt=[xt])[xt].reshape(-1)
    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(Tensor(base.copy())).data)
            flat[i] = orig - step
            fm = float(f(Tensor(base.copy())).data)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
