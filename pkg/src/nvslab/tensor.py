"""Dense tensors on numpy storage with reverse-mode automatic differentiation.

Every differentiable operation records its inputs and a backward closure on
the produced tensor; ``Tensor.backward()`` replays the recorded graph once in
reverse topological order. Within a pass, gradients propagate through a
pass-local table; leaf tensors (parameters and inputs) receive the result
additively in ``.grad``, so two backward passes through the same leaf sum.
The engine is deliberately small: only the primitives the models in this
package need, each with a hand-written backward that is finite-difference
checked in the test suite.
"""

from __future__ import annotations

import hashlib
import threading
from contextlib import contextmanager

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / frozen models)."""
    prev = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape.

    ``data`` is a contiguous float64 array by default (float32 selectable via
    ``dtype``). ``grad`` is allocated lazily on first accumulation and always
    mirrors ``data``'s shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None

    # -- introspection -----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- gradient plumbing --------------------------------------------------

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate ``.grad`` of every reachable leaf that requires grad.

        The receiver must be a scalar (size 1); its seed gradient is 1.
        Intermediate gradients live only for the duration of the pass.
        """
        if self.size != 1:
            raise ShapeError(f"backward() root must be scalar, got shape {self.shape}")
        order = _toposort(self)
        flowing = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node._backward_fn is None:
                node._accumulate(g)
                continue
            for parent, pg in node._backward_fn(g):
                prev = flowing.get(id(parent))
                # merge without mutating: contributions may alias op buffers
                flowing[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return add(self, -other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return _reduce(self, axis, op="sum")

    def mean(self, axis=None):
        return _reduce(self, axis, op="mean")

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes if len(axes) > 1 else axes[0])

    def pow(self, p: float):
        return pow_const(self, p)


def _toposort(root: Tensor):
    order, visited, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def _result(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward_fn = backward_fn
    return out


def _check_same_dtype(*tensors: Tensor):
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise TypeError(f"mixed tensor dtypes {sorted(d.name for d in dtypes)}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic primitives
# ---------------------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; the second operand may be a python scalar."""
    if not isinstance(b, Tensor):
        c = float(b)
        data = a.data + np.asarray(c, dtype=a.dtype)
        return _result(data, (a,), lambda g: ((a, g),))

    _check_same_dtype(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g, b.shape)))
        return out

    return _result(data, (a, b), backward)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; the second operand may be a python scalar."""
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    _check_same_dtype(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, _unbroadcast(g * b.data, a.shape)))
        if b.requires_grad:
            out.append((b, _unbroadcast(g * a.data, b.shape)))
        return out

    return _result(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    c = float(c)
    data = a.data * np.asarray(c, dtype=a.dtype)
    return _result(data, (a,), lambda g: ((a, g * np.asarray(c, dtype=a.dtype)),))


def pow_const(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent.

    Fractional exponents require strictly positive input.
    """
    p = float(p)
    data = a.data**p
    return _result(data, (a,), lambda g: ((a, g * p * a.data ** (p - 1.0)),))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _result(data, (a,), lambda g: ((a, g / a.data),))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _result(data, (a,), lambda g: ((a, g * data),))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x), the smooth gating nonlinearity."""
    # tanh form of the logistic avoids exp overflow at large |x|
    sig = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    data = a.data * sig
    return _result(
        data, (a,), lambda g: ((a, g * (sig * (1.0 + a.data * (1.0 - sig)))),)
    )


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        return ((a, data * (g - inner)),)

    return _result(data, (a,), backward)


def _reduce(a: Tensor, axis, op: str) -> Tensor:
    if axis is None:
        reduced = a.data.sum() if op == "sum" else a.data.mean()
        data = np.asarray(reduced, dtype=a.dtype)
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        data = a.data.sum(axis=axes) if op == "sum" else a.data.mean(axis=axes)
        count = int(np.prod([a.shape[i] for i in axes]))

    def backward(g):
        if axis is None:
            full = np.broadcast_to(g.reshape(()), a.shape)
        else:
            axes_ = (axis,) if isinstance(axis, int) else tuple(axis)
            full = np.broadcast_to(np.expand_dims(g, axes_), a.shape)
        if op == "mean":
            return ((a, np.ascontiguousarray(full) / count),)
        return ((a, np.ascontiguousarray(full)),)

    return _result(data, (a,), backward)


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)
    return _result(data, (a,), lambda g: ((a, g.reshape(a.shape)),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    data = np.ascontiguousarray(a.data.transpose(axes))
    inverse = tuple(np.argsort(axes))
    return _result(
        data, (a,), lambda g: ((a, np.ascontiguousarray(g.transpose(inverse))),)
    )


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    _check_same_dtype(*tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        return [
            (t, np.ascontiguousarray(piece))
            for t, piece in zip(tensors, pieces)
            if t.requires_grad
        ]

    return _result(data, tuple(tensors), backward)


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    data = np.ascontiguousarray(a.data[index])

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return ((a, full),)

    return _result(data, (a,), backward)


def embedding(table: Tensor, idx) -> Tensor:
    """Row lookup: out[..., :] = table[idx[...], :]."""
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("embedding indices must be integers")
    data = table.data[idx]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return ((table, full),)

    return _result(data, (table,), backward)


# ---------------------------------------------------------------------------
# linear algebra / neural primitives
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    data = a.data @ b.data

    def backward(g):
        out = []
        if a.requires_grad:
            out.append((a, g @ b.data.T))
        if b.requires_grad:
            out.append((b, a.data.T @ g))
        return out

    return _result(data, (a, b), backward)


def _im2col(xp: np.ndarray, stride: int, oh: int, ow: int) -> np.ndarray:
    b, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        b * oh * ow, c * 9
    )


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """3x3 cross-correlation with padding 1 and stride 1 or 2.

    x: (b, c, h, w)   w: (o, c, 3, 3)   ->   (b, o, h', w')
    with h' = floor((h + 2 - 3) / stride) + 1.
    """
    _check_same_dtype(x, w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D operands, got {x.shape} and {w.shape}")
    if w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d kernel must be 3x3, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv2d channel mismatch: input has {x.shape[1]}, kernel expects {w.shape[1]}"
        )
    if stride not in (1, 2):
        raise ShapeError(f"conv2d stride must be 1 or 2, got {stride}")

    b, c, h, wd = x.shape
    o = w.shape[0]
    oh = (h + 2 - 3) // stride + 1
    ow = (wd + 2 - 3) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, stride, oh, ow)
    wmat = w.data.reshape(o, c * 9).T
    data = (cols @ wmat).reshape(b, oh, ow, o).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(data)

    def backward(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(b * oh * ow, o)
        out = []
        if w.requires_grad:
            # columns are recomputed here: cheaper than keeping them alive
            cols_b = _im2col(
                np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1))), stride, oh, ow
            )
            out.append((w, (gm.T @ cols_b).reshape(o, c, 3, 3)))
        if x.requires_grad:
            dcols = (gm @ wmat.T).reshape(b, oh, ow, c, 3, 3)
            dxp = np.zeros((b, c, h + 2, wd + 2), dtype=x.dtype)
            for ki in range(3):
                for kj in range(3):
                    dxp[
                        :, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride
                    ] += dcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
            out.append((x, np.ascontiguousarray(dxp[:, :, 1 : h + 1, 1 : wd + 1])))
        return out

    return _result(data, (x, w), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale & shift."""
    _check_same_dtype(x, gamma, beta)
    d = x.shape[-1]
    if d < 2:
        raise ShapeError(f"layer_norm normalized extent must be >= 2, got {d}")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine parameters must have shape ({d},), got {gamma.shape}/{beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = xc * inv
    data = xhat * gamma.data + beta.data

    def backward(g):
        out = []
        if gamma.requires_grad:
            out.append((gamma, (g * xhat).reshape(-1, d).sum(axis=0)))
        if beta.requires_grad:
            out.append((beta, g.reshape(-1, d).sum(axis=0)))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            out.append((x, inv * (dxhat - m1 - xhat * m2)))
        return out

    return _result(data, (x, gamma, beta), backward)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention over (batch, heads, tokens, dim) operands."""
    _check_same_dtype(q, k, v)
    if not (q.ndim == k.ndim == v.ndim == 4):
        raise ShapeError(
            f"attention expects (b, heads, n, d) operands, got {q.shape}/{k.shape}/{v.shape}"
        )
    if q.shape[0] != k.shape[0] or q.shape[1] != k.shape[1] or k.shape[:3] != v.shape[:3]:
        raise ShapeError(
            f"attention batch/head/token mismatch: {q.shape} / {k.shape} / {v.shape}"
        )
    if q.shape[3] != k.shape[3]:
        raise ShapeError(f"attention q/k feature dims differ: {q.shape} vs {k.shape}")

    inv_sqrt_d = 1.0 / np.sqrt(np.asarray(q.shape[3], dtype=q.dtype))
    scores = (q.data @ k.data.swapaxes(-1, -2)) * inv_sqrt_d
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=-1, keepdims=True)
    data = attn @ v.data

    def backward(g):
        out = []
        if v.requires_grad:
            out.append((v, attn.swapaxes(-1, -2) @ g))
        if q.requires_grad or k.requires_grad:
            dattn = g @ v.data.swapaxes(-1, -2)
            dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
            dscores *= inv_sqrt_d
            if q.requires_grad:
                out.append((q, dscores @ k.data))
            if k.requires_grad:
                out.append((k, dscores.swapaxes(-1, -2) @ q.data))
        return out

    return _result(data, (q, k, v), backward)


def _resample_matrix(n_in: int, n_out: int, mode: str, dtype) -> np.ndarray:
    """Corner-aligned 1-D resampling matrix (n_out x n_in)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    if mode == "nearest":
        idx = np.rint(pos).astype(int)
        m[np.arange(n_out), idx] = 1.0
    elif mode == "bilinear":
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w1 = pos - i0
        m[np.arange(n_out), i0] += 1.0 - w1
        m[np.arange(n_out), i1] += w1
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return m.astype(dtype)


def interpolate2d(x: Tensor, out_h: int, out_w: int, mode: str = "bilinear") -> Tensor:
    """Deterministic spatial resampling of (b, c, h, w) with a corner-aligned grid."""
    if x.ndim != 4:
        raise ShapeError(f"interpolate2d expects (b, c, h, w), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"interpolate2d output extents must be >= 1, got {out_h}x{out_w}")
    h, w = x.shape[2], x.shape[3]
    mh = _resample_matrix(h, out_h, mode, x.dtype)
    mw = _resample_matrix(w, out_w, mode, x.dtype)
    data = np.einsum("ph,bchw,qw->bcpq", mh, x.data, mw, optimize=True)

    def backward(g):
        return ((x, np.einsum("ph,bcpq,qw->bchw", mh, g, mw, optimize=True)),)

    return _result(np.ascontiguousarray(data), (x,), backward)


# ---------------------------------------------------------------------------
# parameter helpers
# ---------------------------------------------------------------------------


def rng_for(*key) -> np.random.Generator:
    """Deterministic generator derived from a structured key.

    Each parameter gets its own stream so that adding or removing unrelated
    parameters never shifts another parameter's initialization.
    """
    digest = hashlib.sha256(repr(key).encode()).digest()
    return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:8], "little")))
