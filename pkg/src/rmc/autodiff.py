"""Reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tape`` is a context manager that switches gradient recording on.  While a
tape is active every primitive attaches a node holding a vector-Jacobian
callback; ``backward`` replays the reachable nodes in reverse creation order.
Tensors created while no tape is active are plain values, so the same forward
code doubles as the fast inference path used for acting, burn-in and target
computation.

The tape is rebuilt for every training step, which keeps memory bounded by a
single step's graph.
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit as _sigmoid

Array = np.ndarray

_LOG2 = float(np.log(2.0))


class ShapeError(ValueError):
    """Raised when a primitive receives incompatible shapes."""


def _shape_error(primitive: str, *shapes) -> ShapeError:
    return ShapeError(f"{primitive}: incompatible shapes {' and '.join(str(tuple(s)) for s in shapes)}")


_state = threading.local()
_node_serial = itertools.count()


def _tape() -> "Tape | None":
    return getattr(_state, "tape", None)


class Tape:
    """Enables gradient recording for the duration of a ``with`` block."""

    def __init__(self) -> None:
        self.n_nodes = 0

    def __enter__(self) -> "Tape":
        if _tape() is not None:
            raise RuntimeError("tapes do not nest; close the active tape first")
        _state.tape = self
        return self

    def __exit__(self, *exc) -> bool:
        _state.tape = None
        return False


class pause:
    """Suspends recording inside an active tape; used for target computation."""

    def __enter__(self) -> "pause":
        self._saved = _tape()
        _state.tape = None
        return self

    def __exit__(self, *exc) -> bool:
        _state.tape = self._saved
        return False


class Node:
    __slots__ = ("parents", "vjp", "seq")

    def __init__(self, parents: tuple, vjp: Callable) -> None:
        self.parents = parents
        self.vjp = vjp
        self.seq = next(_node_serial)


class Tensor:
    """Array value, optionally connected to the recorded graph."""

    __slots__ = ("data", "node")

    def __init__(self, data: Array, node: Node | None = None) -> None:
        self.data = data
        self.node = node

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = "rec" if self.node is not None else "const"
        return f"Tensor({tag}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(value, copy: bool = False) -> Tensor:
    """Wrap a value as a constant float64 tensor."""
    arr = np.array(value, dtype=np.float64) if copy else np.asarray(value, dtype=np.float64)
    return Tensor(arr)


def _coerce(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return tensor(value)


def _record(parents: tuple, vjp: Callable, data: Array) -> Tensor:
    tape = _tape()
    if tape is None:
        return Tensor(data)
    tape.n_nodes += 1
    return Tensor(data, Node(parents, vjp))


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum a broadcast gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise _shape_error("add", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _record((a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), out)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise _shape_error("sub", a.shape, b.shape) from None
    sa, sb = a.shape, b.shape
    return _record((a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), out)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise _shape_error("mul", a.shape, b.shape) from None
    da, db, sa, sb = a.data, b.data, a.shape, b.shape
    return _record((a, b), lambda g: (_unbroadcast(g * db, sa), _unbroadcast(g * da, sb)), out)


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise _shape_error("matmul", a.shape, b.shape)
    out = a.data @ b.data
    da, db = a.data, b.data
    return _record((a, b), lambda g: (g @ db.T, da.T @ g), out)


def tanh(x) -> Tensor:
    x = _coerce(x)
    out = np.tanh(x.data)
    return _record((x,), lambda g: (g * (1.0 - out * out),), out)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    out = _sigmoid(x.data)
    return _record((x,), lambda g: (g * out * (1.0 - out),), out)


def relu(x) -> Tensor:
    x = _coerce(x)
    out = np.maximum(x.data, 0.0)
    d = x.data
    return _record((x,), lambda g: (g * (d > 0),), out)


def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)
    return _record((x,), lambda g: (g * out,), out)


def log(x) -> Tensor:
    x = _coerce(x)
    out = np.log(x.data)
    d = x.data
    return _record((x,), lambda g: (g / d,), out)


def square(x) -> Tensor:
    x = _coerce(x)
    out = x.data * x.data
    d = x.data
    return _record((x,), lambda g: (g * (2.0 * d),), out)


def absolute(x) -> Tensor:
    """Elementwise |x| with subgradient 0 at the origin."""
    x = _coerce(x)
    out = np.abs(x.data)
    s = np.sign(x.data)
    return _record((x,), lambda g: (g * s,), out)


def softplus(x) -> Tensor:
    """log(1 + exp(x)) computed without overflow for large |x|."""
    x = _coerce(x)
    out = np.logaddexp(0.0, x.data)
    d = x.data
    return _record((x,), lambda g: (g * _sigmoid(d),), out)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient passes only where x is strictly inside or equal."""
    x = _coerce(x)
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _record((x,), lambda g: (g * mask,), out)


def minimum(a, b) -> Tensor:
    """Elementwise min; at ties the gradient goes to the first argument."""
    a, b = _coerce(a), _coerce(b)
    if a.shape != b.shape:
        raise _shape_error("minimum", a.shape, b.shape)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    return _record((a, b), lambda g: (g * take_a, g * ~take_a), out)


def norm_last(x) -> Tensor:
    """Euclidean norm over the last axis; subgradient 0 at the origin."""
    x = _coerce(x)
    if x.ndim < 1:
        raise _shape_error("norm_last", x.shape)
    out = np.sqrt(np.sum(x.data * x.data, axis=-1))
    d = x.data

    def vjp(g):
        safe = np.where(out == 0.0, 1.0, out)
        return ((g / safe)[..., None] * d,)

    return _record((x,), vjp, out)


def row_sum(x) -> Tensor:
    """Sum over the last axis."""
    x = _coerce(x)
    if x.ndim < 1:
        raise _shape_error("row_sum", x.shape)
    out = np.sum(x.data, axis=-1)
    shape = x.shape
    return _record((x,), lambda g: (np.broadcast_to(g[..., None], shape),), out)


def sum_all(x) -> Tensor:
    x = _coerce(x)
    out = np.asarray(np.sum(x.data))
    shape = x.shape
    return _record((x,), lambda g: (np.broadcast_to(g, shape),), out)


def mean_all(x) -> Tensor:
    x = _coerce(x)
    out = np.asarray(np.mean(x.data))
    shape, n = x.shape, x.size
    return _record((x,), lambda g: (np.broadcast_to(g / n, shape),), out)


def concat_last(parts: Sequence) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_coerce(p) for p in parts]
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise _shape_error("concat_last", *[p.shape for p in parts])
    out = np.concatenate([p.data for p in parts], axis=-1)
    offsets = np.cumsum([p.shape[-1] for p in parts])[:-1]

    def vjp(g):
        return tuple(np.split(g, offsets, axis=-1))

    return _record(tuple(parts), vjp, out)


def stack_rows(parts: Sequence) -> Tensor:
    """Concatenate equal-shaped 2-D tensors along axis 0 (time-major blocks)."""
    parts = [_coerce(p) for p in parts]
    shape = parts[0].shape
    for p in parts[1:]:
        if p.shape != shape or p.ndim != 2:
            raise _shape_error("stack_rows", *[p.shape for p in parts])
    out = np.concatenate([p.data for p in parts], axis=0)
    rows = shape[0]

    def vjp(g):
        return tuple(g[i * rows:(i + 1) * rows] for i in range(len(parts)))

    return _record(tuple(parts), vjp, out)


def stop_gradient(x) -> Tensor:
    """Same value, detached from the recorded graph."""
    x = _coerce(x)
    return Tensor(x.data)


def affine(x, w, b) -> Tensor:
    """x @ w + b fused into a single node."""
    x, w, b = _coerce(x), _coerce(w), _coerce(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise _shape_error("affine", x.shape, w.shape, b.shape)
    out = x.data @ w.data + b.data
    dx_, dw_ = x.data, w.data

    def vjp(g):
        return (g @ dw_.T, dx_.T @ g, g.sum(axis=0))

    return _record((x, w, b), vjp, out)


def gru_cell(x, h, w_in, w_hid, b) -> Tensor:
    """One GRU step fused into a single node.

    Gate columns of ``w_in``/``w_hid``/``b`` are ordered update|reset|candidate.
    The candidate hidden path is gated before the tanh:
        z = sigmoid(x Wz + h Uz + bz)
        r = sigmoid(x Wr + h Ur + br)
        n = tanh(x Wn + r * (h Un) + bn)
        out = (1 - z) * n + z * h
    """
    x, h, w_in, w_hid, b = (_coerce(v) for v in (x, h, w_in, w_hid, b))
    bsz, dx = x.shape if x.ndim == 2 else (None, None)
    hid = h.shape[1] if h.ndim == 2 else None
    if (
        bsz is None
        or hid is None
        or h.shape[0] != bsz
        or w_in.shape != (dx, 3 * hid)
        or w_hid.shape != (hid, 3 * hid)
        or b.shape != (3 * hid,)
    ):
        raise _shape_error("gru_cell", x.shape, h.shape, w_in.shape, w_hid.shape, b.shape)

    xd, hd, wi, wh, bd = x.data, h.data, w_in.data, w_hid.data, b.data
    gi = xd @ wi
    gh = hd @ wh
    hn = gh[:, 2 * hid:]
    z = _sigmoid(gi[:, :hid] + gh[:, :hid] + bd[:hid])
    r = _sigmoid(gi[:, hid:2 * hid] + gh[:, hid:2 * hid] + bd[hid:2 * hid])
    n = np.tanh(gi[:, 2 * hid:] + r * hn + bd[2 * hid:])
    out = (1.0 - z) * n + z * hd

    def vjp(g):
        dgi = np.empty((g.shape[0], 3 * hid))
        dgh = np.empty_like(dgi)
        dzi = dgi[:, :hid]
        dri = dgi[:, hid:2 * hid]
        dni = dgi[:, 2 * hid:]
        np.multiply(g, 1.0 - z, out=dni)
        dni *= 1.0 - n * n
        np.multiply(g, hd - n, out=dzi)
        dzi *= z * (1.0 - z)
        np.multiply(dni, hn * r * (1.0 - r), out=dri)
        dgh[:, :2 * hid] = dgi[:, :2 * hid]
        np.multiply(dni, r, out=dgh[:, 2 * hid:])
        dhd = dgh @ wh.T
        dhd += g * z
        return (dgi @ wi.T, dhd, xd.T @ dgi, hd.T @ dgh, dgi.sum(axis=0))

    return _record((x, h, w_in, w_hid, b), vjp, out)


def mlp_chain(x, weights: Sequence, biases: Sequence, final_relu: bool = False) -> Tensor:
    """Affine/relu stack fused into a single node.

    relu follows every layer except the last; ``final_relu`` applies it there
    too.  Equivalent to chaining ``affine`` and ``relu`` but with one node and
    one vjp for the whole stack.
    """
    x = _coerce(x)
    weights = [_coerce(w) for w in weights]
    biases = [_coerce(b) for b in biases]
    if len(weights) != len(biases) or not weights or x.ndim != 2:
        raise _shape_error("mlp_chain", x.shape, *[w.shape for w in weights])
    n = len(weights)
    acts = [x.data]
    a = x.data
    for i, (w, b) in enumerate(zip(weights, biases)):
        if a.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
            raise _shape_error("mlp_chain", a.shape, w.shape, b.shape)
        a = a @ w.data + b.data
        if i < n - 1 or final_relu:
            np.maximum(a, 0.0, out=a)
        acts.append(a)
    w_data = [w.data for w in weights]

    def vjp(g):
        grads_w: list = [None] * n
        grads_b: list = [None] * n
        for i in range(n - 1, -1, -1):
            if i < n - 1 or final_relu:
                g = g * (acts[i + 1] > 0)
            grads_w[i] = acts[i].T @ g
            grads_b[i] = g.sum(axis=0)
            g = g @ w_data[i].T
        out: list = [g]
        for gw, gb in zip(grads_w, grads_b):
            out.extend([gw, gb])
        return tuple(out)

    parents: list = [x]
    for w, b in zip(weights, biases):
        parents.extend([w, b])
    return _record(tuple(parents), vjp, acts[-1])


def squash_correction(u) -> Tensor:
    """sum_j log(1 - tanh(u_j)^2), evaluated as 2 (log 2 - u - softplus(-2u))."""
    per = sub(2.0 * _LOG2, add(mul(u, 2.0), mul(softplus(mul(u, -2.0)), 2.0)))
    return row_sum(per)


# ---------------------------------------------------------------------------
# backward


class Gradients:
    """Map from tensor to accumulated gradient, exact zero when unreachable."""

    def __init__(self, by_id: dict) -> None:
        self._by_id = by_id

    def wrt(self, t: Tensor) -> Array:
        g = self._by_id.get(id(t))
        if g is None:
            return np.zeros_like(t.data)
        return g

    def has(self, t: Tensor) -> bool:
        return id(t) in self._by_id


def backward(loss: Tensor) -> Gradients:
    """Accumulate d(loss)/d(tensor) for every tensor reachable from ``loss``.

    ``loss`` must have a single element.  Repeated calls on the same graph are
    independent; reverse order follows node creation order, which is a valid
    topological order by construction.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if loss.node is None:
        return Gradients({})

    reachable: dict[int, Node] = {}
    stack = [loss.node]
    while stack:
        node = stack.pop()
        if id(node) in reachable:
            continue
        reachable[id(node)] = node
        for p in node.parents:
            if p.node is not None and id(p.node) not in reachable:
                stack.append(p.node)
    order = sorted(reachable.values(), key=lambda n: n.seq, reverse=True)

    node_grads: dict[int, Array] = {id(loss.node): np.ones_like(loss.data)}
    owned: set[int] = {id(loss.node)}
    leaf_grads: dict[int, Array] = {}
    leaf_owned: set[int] = set()

    def accumulate(store: dict, owned_keys: set, key: int, g: Array) -> None:
        cur = store.get(key)
        if cur is None:
            store[key] = g
        else:
            if key not in owned_keys:
                cur = cur.copy()
                store[key] = cur
                owned_keys.add(key)
            cur += g

    for node in order:
        g = node_grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node.vjp(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None:
                continue
            if parent.node is not None:
                accumulate(node_grads, owned, id(parent.node), pg)
            else:
                accumulate(leaf_grads, leaf_owned, id(parent), pg)

    # gradients attached to interior nodes belong to their output tensors,
    # which the caller does not usually hold; only leaves are reported
    return Gradients(leaf_grads)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(build_loss: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst unit-floored relative error between backward() and central differences.

    ``build_loss`` must rebuild the scalar loss from the current values of
    ``params``; it is re-evaluated twice per parameter element with the
    element nudged by +/- step.
    """
    with Tape():
        loss = build_loss()
    grads = backward(loss)
    worst = 0.0
    for p in params:
        analytic = grads.wrt(p).reshape(-1)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            up = float(build_loss().data)
            flat[i] = saved - step
            down = float(build_loss().data)
            flat[i] = saved
            numeric = (up - down) / (2.0 * step)
            err = abs(numeric - analytic[i]) / max(1.0, abs(numeric), abs(analytic[i]))
            worst = max(worst, err)
    return worst
