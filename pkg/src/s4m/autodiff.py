"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape``)
and touching at least one tensor with ``requires_grad`` are appended to the
tape together with their vector-Jacobian product. ``tape.backward(loss)``
replays the record in reverse order.

Broadcasting follows numpy; adjoints sum gradients back to operand shapes.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "no_grad", "ShapeError", "NumericError", "ContractError",
    "OracleError", "tensor", "as_tensor", "add", "sub", "mul", "div", "neg", "matmul",
    "relu", "exp", "log", "sqrt", "softmax", "layer_norm", "conv1d", "mean", "sum",
    "concat", "stack", "reshape", "transpose", "scale", "fft_conv", "inv",
    "take_along_axis", "take_rows", "l2_normalize", "dropout", "ssm_kernel", "getitem",
    "finite_difference_check",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested primitive."""


class NumericError(FloatingPointError):
    """A primitive produced NaN or Inf from its inputs."""

    def __init__(self, op: str, msg: str = ""):
        self.op = op
        super().__init__(f"non-finite output in op '{op}'" + (f": {msg}" if msg else ""))


class ContractError(ValueError):
    """Caller violated an operation precondition."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite probe."""


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class no_grad:
    """Suspend tape recording inside the block."""

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(None)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None
        self._idx: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.shape[0]

    # operator sugar
    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __neg__(self): return neg(self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False): return sum(self, axis, keepdims)
    def mean(self, axis=None, keepdims=False): return mean(self, axis, keepdims)
    def reshape(self, *shape): return reshape(self, shape[0] if len(shape) == 1 else shape)
    def transpose(self, *axes): return transpose(self, axes or None)

    @property
    def T(self): return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    shape: tuple[int, ...]


@dataclass
class Tape:
    """Append-only operation record; parents always precede children."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def record(self, op, parents, vjp, out: Tensor) -> None:
        out.requires_grad = True
        out._tape = self
        out._idx = len(self.nodes)
        self.nodes.append(Node(op, parents, vjp, out.shape))

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss) to every leaf; returns ``{leaf: grad}``.

        Leaves in ``params`` that did not take part in the loss get zeros.
        The gradient is also stored on each leaf's ``.grad``.
        """
        if loss.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.shape}")
        if loss._tape is not self:
            raise ContractError("loss was not produced on this tape")
        node_grads: list[np.ndarray | None] = [None] * len(self.nodes)
        node_grads[loss._idx] = np.ones(loss.shape)
        leaf: dict[Tensor, np.ndarray] = {}
        for i in range(len(self.nodes) - 1, -1, -1):
            g = node_grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            for p, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                if p._tape is self:
                    j = p._idx
                    node_grads[j] = pg if node_grads[j] is None else node_grads[j] + pg
                else:
                    leaf[p] = pg if p not in leaf else leaf[p] + pg
            node_grads[i] = None
        if params is not None:
            for p in params:
                if p not in leaf:
                    leaf[p] = np.zeros(p.shape)
        for p, g in leaf.items():
            p.grad = g
        return leaf

    def dump(self) -> str:
        """Indented text listing of the recorded operations."""
        lines = []
        for i, n in enumerate(self.nodes):
            refs = ", ".join(f"%{p._idx}" if p._tape is self else ("leaf" if p.requires_grad else "const")
                             for p in n.parents)
            lines.append(f"%{i} = {n.op}({refs}) shape={n.shape}")
        return "\n".join("  " + ln for ln in lines)


def _finish(op: str, out: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    if not np.all(np.isfinite(out)):
        raise NumericError(op)
    t = Tensor.__new__(Tensor)
    t.data = out
    t.requires_grad = False
    t.grad = None
    t._tape = None
    t._idx = None
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(op, parents, vjp, t)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _finish("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _finish("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _finish("mul", a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _finish("div", out, (a, b),
                   lambda g: (_unbroadcast(g / b.data, a.shape),
                              _unbroadcast(-g * a.data / b.data ** 2, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _finish("neg", -a.data, (a,), lambda g: (-g,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _finish("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    return _finish("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _finish("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _finish("log", out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _finish("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}") from None

    def vjp(g):
        if b.ndim == 2:
            ga = g @ b.data.T if a.requires_grad else None
            gb = (a.data.reshape(-1, a.shape[-1]).T @ np.broadcast_to(g, g.shape).reshape(-1, g.shape[-1])
                  if b.requires_grad and a.ndim == g.ndim else None)
            if b.requires_grad and gb is None:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            if ga is not None:
                ga = _unbroadcast(ga, a.shape)
            return ga, gb
        if a.ndim == 2:
            gb = a.data.T @ g if b.requires_grad else None
            ga = None
            if a.requires_grad:
                gt = np.swapaxes(g, -1, -2).reshape(-1, g.shape[-2])
                bt = np.swapaxes(b.data, -1, -2)
                bt = np.broadcast_to(bt, g.shape[:-2] + bt.shape[-2:]).reshape(-1, b.shape[-2])
                ga = gt.T @ bt
            return ga, (_unbroadcast(gb, b.shape) if gb is not None else None)
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _finish("matmul", a.data @ b.data, (a, b), vjp)


def inv(a) -> Tensor:
    """Batched matrix inverse over the trailing two axes."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"inv: expected square trailing dims, got {a.shape}")
    out = np.linalg.inv(a.data)

    def vjp(g):
        it = np.swapaxes(out, -1, -2)
        return (-(it @ g @ it),)

    return _finish("inv", out, (a,), vjp)


# ---------------------------------------------------------------- reductions / shape

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _finish("sum", out, (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return _finish("mean", out, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}: {e}") from None
    return _finish("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    out = np.transpose(a.data, axes)
    inv_axes = None if axes is None else tuple(np.argsort(axes))
    return _finish("transpose", out, (a,), lambda g: (np.transpose(g, inv_axes),))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = not any(isinstance(p, (list, np.ndarray)) for p in parts)

    def vjp(g):
        full = np.zeros(a.shape)
        if basic:  # views never repeat an element
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _finish("slice", np.array(out, dtype=np.float64), (a,), vjp)


def take_rows(a, idx) -> Tensor:
    """Gather along axis -2 with an integer index array of any shape.

    ``a`` (..., P, C) -> (..., *idx.shape, C). Repeated indices accumulate in
    the adjoint, which is a one-hot matrix product rather than a scatter.
    """
    a = as_tensor(a)
    idx = np.asarray(idx)
    if a.ndim < 2:
        raise ShapeError(f"take_rows needs at least 2 dims, got {a.shape}")
    P, C = a.shape[-2:]
    if idx.size and (idx.min() < 0 or idx.max() >= P):
        raise ShapeError(f"take_rows: index out of range for {P} rows")
    lead = a.shape[:-2]
    out = a.data[(Ellipsis, idx, slice(None))]
    # sliding windows idx[t, j] = base + t + j: adjoint is a sum of shifted copies
    sliding = (idx.ndim == 2 and idx.size > 0
               and np.array_equal(idx, idx[0, 0] + np.add.outer(np.arange(idx.shape[0]), np.arange(idx.shape[1]))))

    def vjp(g):
        if sliding:
            n, w = idx.shape
            base = int(idx[0, 0])
            full = np.zeros(a.shape)
            for j in range(w):
                full[..., base + j:base + j + n, :] += g[..., :, j, :]
            return (full,)
        flat = g.reshape(lead + (idx.size, C))
        sel = np.zeros((P, idx.size))
        sel[idx.reshape(-1), np.arange(idx.size)] = 1.0
        return (sel @ flat,)

    return _finish("take_rows", out, (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or any(t.shape[i] != ts[0].shape[i] for i in range(t.ndim) if i != ax):
            raise ShapeError(f"concat: {ts[0].shape} vs {t.shape} along axis {axis}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts)))

    return _finish("concat", out, ts, vjp)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    out = np.stack([t.data for t in ts], axis=axis)
    return _finish("stack", out, ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def take_along_axis(a, indices: np.ndarray, axis: int = -1) -> Tensor:
    """Gather with integer ``indices`` (not differentiated)."""
    a = as_tensor(a)
    indices = np.asarray(indices)
    out = np.take_along_axis(a.data, indices, axis=axis)

    def vjp(g):
        full = np.zeros(a.shape)
        # put_along_axis would overwrite duplicate indices
        ax = axis % a.ndim
        idx = list(np.indices(indices.shape, sparse=True))
        idx[ax] = indices
        np.add.at(full, tuple(idx), g)
        return (full,)

    return _finish("take_along_axis", out, (a,), vjp)


# ---------------------------------------------------------------- nn primitives

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _finish("softmax", out, (a,), vjp)


def layer_norm(a, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis (no affine part; compose with mul/add)."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gxm = (g * xhat).mean(axis=-1, keepdims=True)
        return (rstd * (g - gm - xhat * gxm),)

    return _finish("layer_norm", xhat, (a,), vjp)


def l2_normalize(a, eps: float = 1e-12) -> Tensor:
    """Scale the last axis to unit Euclidean norm."""
    a = as_tensor(a)
    n = np.sqrt((a.data ** 2).sum(axis=-1, keepdims=True))
    n = np.maximum(n, eps)
    out = a.data / n

    def vjp(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / n,)

    return _finish("l2_normalize", out, (a,), vjp)


def conv1d(x, w, b=None) -> Tensor:
    """Causal 1-D convolution along time.

    x: (..., L, C_in); w: (k, C_in, C_out); b: (C_out,) or None.
    out[t] = sum_j x[t - (k-1) + j] @ w[j] with zero left padding, so the
    output keeps length L.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 3 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"conv1d: input {x.shape} vs weight {w.shape}")
    k = w.shape[0]
    L = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(k - 1, 0), (0, 0)]
    xp = np.pad(x.data, pad)
    out = np.zeros(x.shape[:-1] + (w.shape[2],))
    for j in range(k):
        out += xp[..., j:j + L, :] @ w.data[j]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[2],):
            raise ShapeError(f"conv1d: bias {b.shape} vs {w.shape[2]} channels")
        out = out + b.data
        parents = (x, w, b)

    def vjp(g):
        gxp = np.zeros(xp.shape)
        gw = np.zeros(w.shape)
        for j in range(k):
            seg = xp[..., j:j + L, :]
            gxp[..., j:j + L, :] += g @ w.data[j].T
            gw[j] = seg.reshape(-1, seg.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        gx = gxp[..., k - 1:, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, g.shape[-1]).sum(axis=0))
        return tuple(grads)

    return _finish("conv1d", out, parents, vjp)


def _causal_fft(k: np.ndarray, u: np.ndarray, L: int) -> np.ndarray:
    n = 2 * L
    kf = np.fft.rfft(k, n=n, axis=-2)
    uf = np.fft.rfft(u, n=n, axis=-2)
    return np.fft.irfft(kf * uf, n=n, axis=-2)[..., :L, :]


def fft_conv(k, u) -> Tensor:
    """Causal linear convolution along axis -2 via zero-padded FFT.

    y[t] = sum_{i<=t} k[i] u[t-i]; k and u broadcast over other axes.
    """
    k, u = as_tensor(k), as_tensor(u)
    if k.ndim < 2 or u.ndim < 2 or k.shape[-2] != u.shape[-2]:
        raise ShapeError(f"fft_conv: kernel {k.shape} vs input {u.shape} (time axis -2)")
    _check_broadcast("fft_conv", k, u)
    L = u.shape[-2]
    n = 2 * L
    kf = np.fft.rfft(k.data, n=n, axis=-2)
    uf = np.fft.rfft(u.data, n=n, axis=-2)
    out = np.fft.irfft(kf * uf, n=n, axis=-2)[..., :L, :]

    def vjp(g):
        # correlation with g == convolution with time-reversed g, reversed back
        grf = np.fft.rfft(g[..., ::-1, :], n=n, axis=-2)
        gu = gk = None
        if u.requires_grad:
            gu = np.fft.irfft(_unbroadcast(kf * grf, uf.shape), n=n, axis=-2)[..., L - 1::-1, :]
        if k.requires_grad:
            # sum over broadcast axes in the frequency domain, then one inverse transform
            gk = np.fft.irfft(_unbroadcast(uf * grf, kf.shape), n=n, axis=-2)[..., L - 1::-1, :]
        return gk, gu

    return _finish("fft_conv", out, (k, u), vjp)


def ssm_kernel(a_bar, b_bar, c, length: int) -> Tensor:
    """Kernel k[i] = C A^i B for a batch of channels.

    a_bar: (R, H, H); b_bar: (R, H); c: (R, H). Returns (length, R).
    Iterates the state v_{i+1} = A v_i; no matrix powers are formed.
    """
    a_bar, b_bar, c = as_tensor(a_bar), as_tensor(b_bar), as_tensor(c)
    R, H = b_bar.shape
    if a_bar.shape != (R, H, H) or c.shape != (R, H):
        raise ShapeError(f"ssm_kernel: A {a_bar.shape}, B {b_bar.shape}, C {c.shape}")
    A = a_bar.data
    states = np.empty((length, R, H))
    v = b_bar.data.copy()
    AT = np.swapaxes(A, -1, -2)
    for i in range(length):
        states[i] = v
        if i + 1 < length:
            v = (v[:, None, :] @ AT)[:, 0, :]          # A v per channel
    out = np.einsum("lrh,rh->lr", states, c.data)

    def vjp(g):
        # adjoint state runs backwards: w_i = C^T g_i + A^T w_{i+1}
        gc = np.einsum("lr,lrh->rh", g, states)
        ws = np.empty((length, R, H))
        gv = np.zeros((R, H))
        for i in range(length - 1, -1, -1):
            gv = gv + g[i][:, None] * c.data
            ws[i] = gv
            if i > 0:
                gv = (gv[:, None, :] @ A)[:, 0, :]
        ga = np.einsum("lri,lrj->rij", ws[1:], states[:-1])
        return ga, gv, gc

    return _finish("ssm_kernel", out, (a_bar, b_bar, c), vjp)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate == 0."""
    a = as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _finish("dropout", a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- gradient oracle

def finite_difference_check(f: Callable[[], Tensor], theta: Tensor, step: float = 1e-5,
                            analytic: np.ndarray | None = None) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` is re-evaluated with ``theta.data`` perturbed in place; the
    relative error per coordinate is |a - n| / max(1, |n|).
    """
    if analytic is None:
        with Tape() as tape:
            loss = f()
        analytic = tape.backward(loss, [theta])[theta]
    numeric = np.zeros(theta.shape)
    flat = theta.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            try:
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
            except NumericError as e:
                raise OracleError(f"non-finite probe at coordinate {i}") from e
            finally:
                flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise OracleError(f"non-finite probe at coordinate {i}")
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
