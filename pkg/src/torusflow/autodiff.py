"""Minimal tape-based automatic differentiation over numpy float64 arrays.

Two modes share one recorded tape:

* reverse mode (``backward``): vector-Jacobian products for training losses;
* forward mode (``forward_tangents`` / ``jvp``): Jacobian-vector products,
  used to assemble exact divergences from basis tangent sweeps.

Operations record onto the currently active ``Tape`` (a context manager,
tracked per thread). With no active tape they just compute values, so
inference pays no bookkeeping. Tangents in the forward sweep always carry one
extra leading axis, so a whole basis of directions propagates in a single
pass; internal axis arguments are normalized to negative indices to keep that
leading axis transparent.

The componentwise periodic ops (``wrap``, ``torus_log``) are differentiable
primitives with unit derivative almost everywhere; the jump set has measure
zero and is ignored, which is exactly what flows on the flat torus need.
"""

from __future__ import annotations

import threading

import numpy as np


class AutodiffError(RuntimeError):
    """Raised for tape misuse or non-finite gradient flow."""


class Tensor:
    """Array value plus optional gradient slot and producing node."""

    __slots__ = ("data", "requires_grad", "grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: "_Node | None" = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # Operator sugar; the named functions below are the actual primitives.
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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return slice_(self, idx)


class _Node:
    __slots__ = ("op", "inputs", "output", "vjp", "jvp", "tape")

    def __init__(self, op, inputs, output, vjp, jvp, tape):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.jvp = jvp
        self.tape = tape


_STATE = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_STATE, "tape", None)


class Tape:
    """Ordered record of primitive ops; creation order is topological order."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise AutodiffError("tapes do not nest; close the active tape first")
        _STATE.tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _STATE.tape = None

    def release(self) -> None:
        """Drop the recorded graph so its buffers free immediately.

        Tensors and nodes reference each other in cycles, which plain
        reference counting cannot collect; the cycle detector only counts
        objects, not array bytes, so large graphs can pile up to gigabytes
        between its passes. Breaking the back-links here makes every
        intermediate refcount-collectable the moment the caller lets go.
        """
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _record(op: str, out_data: np.ndarray, inputs: tuple, vjp, jvp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        node = _Node(op, inputs, out, vjp, jvp, tape)
        tape.nodes.append(node)
        out.node = node
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _expand_tangent(t: np.ndarray | None, n_dirs: int, shape: tuple) -> np.ndarray:
    """Broadcast a (possibly missing) tangent to the full [n_dirs, *shape]."""
    if t is None:
        return np.zeros((n_dirs,) + shape)
    return np.broadcast_to(t, (n_dirs,) + shape)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    def jvp(ts, n):
        ta, tb = ts
        if ta is not None and tb is not None:
            return ta + tb
        return _expand_tangent(ta if ta is not None else tb, n, out.shape)

    return _record("add", out, (a, b), vjp, jvp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def vjp(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))

    def jvp(ts, n):
        ta, tb = ts
        if ta is not None and tb is not None:
            return ta - tb
        if ta is not None:
            return _expand_tangent(ta, n, out.shape)
        return -_expand_tangent(tb, n, out.shape)

    return _record("sub", out, (a, b), vjp, jvp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (-g,)

    def jvp(ts, n):
        return -ts[0]

    return _record("neg", -a.data, (a,), vjp, jvp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape))

    def jvp(ts, n):
        ta, tb = ts
        if ta is not None:
            acc = ta * b.data
            if tb is not None:
                acc += a.data * tb  # acc is fresh, in-place add is safe
        else:
            acc = a.data * tb
        return np.broadcast_to(acc, (n,) + out.shape) if acc.shape != (n,) + out.shape else acc

    return _record("mul", out, (a, b), vjp, jvp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    def jvp(ts, n):
        ta, tb = ts
        acc = None
        if ta is not None:
            acc = ta / b.data
        if tb is not None:
            term = -tb * (a.data / (b.data * b.data))
            acc = term if acc is None else acc + term
        return np.broadcast_to(acc, (n,) + out.shape) if acc.shape != (n,) + out.shape else acc

    return _record("div", out, (a, b), vjp, jvp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)

    def vjp(g):
        return (g * c,)

    def jvp(ts, n):
        return ts[0] * c

    return _record("scale", a.data * c, (a,), vjp, jvp)


def matmul(a, b) -> Tensor:
    """Stacked matrix product: a is [..., m, k], b is a plain [k, n] matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise AutodiffError("matmul expects a [..., m, k] left and [k, n] right operand")
    out = a.data @ b.data
    k = a.shape[-1]

    def vjp(g):
        da = g @ b.data.T
        db = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
        return (da, db)

    def jvp(ts, n):
        ta, tb = ts
        acc = None
        if ta is not None:
            acc = ta @ b.data
        if tb is not None:
            if a.ndim != 2:
                raise AutodiffError("matmul jvp with a seeded right operand needs a 2-D left operand")
            acc = a.data @ tb if acc is None else acc + a.data @ tb
        return acc

    return _record("matmul", out, (a, b), vjp, jvp)


def linear(x, w, b=None) -> Tensor:
    """Affine map on the last axis: x [..., in] @ w [in, out] + b [out].

    Fused so one dgemm covers the whole leading batch; the workhorse of every
    network layer.
    """
    x, w = as_tensor(x), as_tensor(w)
    n_in, n_out = w.shape
    if x.shape[-1] != n_in:
        raise AutodiffError(f"linear: input width {x.shape[-1]} != {n_in}")
    x2 = x.data.reshape(-1, n_in)
    out2 = x2 @ w.data
    if b is not None:
        b = as_tensor(b)
        out2 = out2 + b.data
    out = out2.reshape(x.shape[:-1] + (n_out,))
    inputs = (x, w) if b is None else (x, w, b)

    def vjp(g):
        g2 = g.reshape(-1, n_out)
        dx = (g2 @ w.data.T).reshape(x.shape)
        dw = x2.T @ g2
        if b is None:
            return (dx, dw)
        return (dx, dw, g2.sum(axis=0))

    def jvp(ts, n):
        tx, tw = ts[0], ts[1]
        tb = ts[2] if len(ts) == 3 else None
        acc = None
        if tx is not None:
            acc = (tx.reshape(-1, n_in) @ w.data).reshape((n,) + out.shape)
        if tw is not None:
            term = (x2 @ tw.reshape(-1, n_in, n_out)).reshape((n,) + out.shape) if tw.ndim == 3 else None
            if term is None:
                raise AutodiffError("linear jvp: weight tangent must be [n, in, out]")
            acc = term if acc is None else acc + term
        if tb is not None:
            tb_full = np.broadcast_to(
                tb.reshape((n,) + (1,) * (len(out.shape) - 1) + (n_out,)), (n,) + out.shape
            )
            acc = tb_full if acc is None else acc + tb_full
        return acc

    return _record("linear", out, inputs, vjp, jvp)


def concat(parts, axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if axis >= 0:
        axis -= parts[0].ndim
    out = np.concatenate([p.data for p in parts], axis=axis)
    widths = [p.shape[axis] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    _zero = np.zeros((), dtype=np.float64)

    def jvp(ts, n):
        # stride-0 views for missing tangents: concatenate reads them as
        # zeros without materializing full arrays first
        pieces = [
            np.broadcast_to(t if t is not None else _zero, (n,) + p.shape)
            for t, p in zip(ts, parts)
        ]
        return np.concatenate(pieces, axis=axis)

    return _record("concat", out, tuple(parts), vjp, jvp)


def slice_(a, idx) -> Tensor:
    """Basic slicing/indexing; advanced (array) indices are not supported."""
    a = as_tensor(a)
    if not isinstance(idx, tuple):
        idx = (idx,)
    for part in idx:
        if not isinstance(part, (slice, int)) and part is not Ellipsis:
            raise AutodiffError("slice_ supports basic indexing only")
    out = a.data[idx]

    def vjp(g):
        da = np.zeros(a.shape)
        da[idx] = g
        return (da,)

    def jvp(ts, n):
        return ts[0][(slice(None),) + _absolute_index(idx, a.ndim)]

    return _record("slice", out, (a,), vjp, jvp)


def _absolute_index(idx: tuple, ndim: int) -> tuple:
    """Expand Ellipsis so an index can be prefixed with the tangent axis."""
    if Ellipsis not in idx:
        return idx
    pos = idx.index(Ellipsis)
    fill = ndim - (len(idx) - 1)
    return idx[:pos] + (slice(None),) * fill + idx[pos + 1 :]


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    def jvp(ts, n):
        return ts[0].reshape((n,) + out.shape)

    return _record("reshape", out, (a,), vjp, jvp)


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = np.broadcast_to(a.data, shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    def jvp(ts, n):
        return np.broadcast_to(ts[0], (n,) + shape)

    # kept as a view: consumers either copy anyway (reshape, concat) or can
    # read strided data directly (elementwise ops)
    return _record("broadcast_to", out, (a,), vjp, jvp)


def sum_along(a, axis, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax - a.ndim if ax >= 0 else ax for ax in axes)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    def jvp(ts, n):
        return ts[0].sum(axis=axes, keepdims=keepdims)

    return _record("sum", out, (a,), vjp, jvp)


def total_sum(a) -> Tensor:
    """Sum of all entries, as a 0-d tensor (for scalar losses)."""
    a = as_tensor(a)
    out = np.asarray(a.data.sum())

    def vjp(g):
        return (np.broadcast_to(g, a.shape),)

    def jvp(ts, n):
        return ts[0].reshape(n, -1).sum(axis=1)

    return _record("total_sum", out, (a,), vjp, jvp)


def square(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g):
        return (g * (2.0 * a.data),)

    def jvp(ts, n):
        return ts[0] * (2.0 * a.data)

    return _record("square", a.data * a.data, (a,), vjp, jvp)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        return (g * (0.5 / out),)

    def jvp(ts, n):
        return ts[0] * (0.5 / out)

    return _record("sqrt", out, (a,), vjp, jvp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    def jvp(ts, n):
        return ts[0] * (1.0 - out * out)

    return _record("tanh", out, (a,), vjp, jvp)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    deriv = out * (1.0 - out)

    def vjp(g):
        return (g * deriv,)

    def jvp(ts, n):
        return ts[0] * deriv

    return _record("sigmoid", out, (a,), vjp, jvp)


def silu(a) -> Tensor:
    """x * sigmoid(x); the smooth gate used by all network layers."""
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig
    deriv = sig * (1.0 + a.data * (1.0 - sig))

    def vjp(g):
        return (g * deriv,)

    def jvp(ts, n):
        return ts[0] * deriv

    return _record("silu", out, (a,), vjp, jvp)


def _raw_wrap(x: np.ndarray, box_length: float) -> np.ndarray:
    out = x - np.floor(x / box_length) * box_length
    return np.where(out >= box_length, 0.0, out)


def wrap(a, box_length: float) -> Tensor:
    """Periodic wrap into [0, L); derivative 1 almost everywhere."""
    a = as_tensor(a)
    L = float(box_length)

    def vjp(g):
        return (g,)

    def jvp(ts, n):
        return ts[0]

    return _record("wrap", _raw_wrap(a.data, L), (a,), vjp, jvp)


def torus_log(base, target, box_length: float) -> Tensor:
    """Nearest-image displacement; d/dtarget = +1, d/dbase = -1 a.e."""
    base, target = as_tensor(base), as_tensor(target)
    L = float(box_length)
    half = 0.5 * L
    out = _raw_wrap(target.data - base.data + half, L) - half

    def vjp(g):
        return (_unbroadcast(-g, base.shape), _unbroadcast(g, target.shape))

    def jvp(ts, n):
        tb, tt = ts
        acc = None
        if tt is not None:
            acc = tt
        if tb is not None:
            acc = -tb if acc is None else acc - tb
        return np.broadcast_to(acc, (n,) + out.shape) if acc.shape != (n,) + out.shape else acc

    return _record("torus_log", out, (base, target), vjp, jvp)


# ---------------------------------------------------------------------------
# Reverse sweep
# ---------------------------------------------------------------------------


def backward(tape: Tape, loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Returns ``{tensor: gradient}`` for those leaves. One reverse sweep per
    tape; a second call raises. The loss must be a recorded scalar.
    """
    if tape._consumed:
        raise AutodiffError("tape already consumed by a previous backward call")
    if not tape.nodes:
        raise AutodiffError("backward called on an empty tape")
    if loss.data.size != 1:
        raise AutodiffError(f"loss must be scalar, got shape {loss.shape}")
    if loss.node is None or loss.node.tape is not tape:
        raise AutodiffError("loss was not recorded on this tape")
    if not np.isfinite(loss.data):
        raise AutodiffError("loss is non-finite; refusing to propagate gradients")
    tape._consumed = True

    try:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[Tensor, np.ndarray] = {}
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for tensor, ig in zip(node.inputs, node.vjp(g)):
                if ig is None:
                    continue
                if tensor.node is None and not tensor.requires_grad:
                    continue  # constant leaf: no gradient wanted
                key = id(tensor)
                grads[key] = grads[key] + ig if key in grads else ig
                if tensor.node is None:
                    # Leaf contributions finish accumulating by the time the
                    # reverse sweep passes the earliest node that consumes them.
                    leaf_grads[tensor] = grads[key]
        for tensor, g in leaf_grads.items():
            if not np.all(np.isfinite(g)):
                raise AutodiffError("non-finite gradient reached a leaf tensor")
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        return leaf_grads
    finally:
        tape.release()


# ---------------------------------------------------------------------------
# Forward (tangent) sweep
# ---------------------------------------------------------------------------


def forward_tangents(
    tape: Tape, seeds: dict[Tensor, np.ndarray], outputs: list[Tensor]
) -> list[np.ndarray]:
    """Propagate a batch of tangent directions through a recorded tape.

    Every seed array has shape [n_dirs, *tensor.shape]; the returned list
    holds one [n_dirs, *output.shape] array per requested output. Tangent
    buffers are freed as soon as their last consumer has fired, so a whole
    basis sweep stays within a small multiple of one forward pass.
    """
    if not seeds:
        raise AutodiffError("forward_tangents needs at least one seeded tensor")
    n_dirs = None
    tangents: dict[int, np.ndarray] = {}
    for tensor, seed in seeds.items():
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape[1:] != tensor.shape:
            raise AutodiffError(
                f"seed shape {seed.shape} does not extend tensor shape {tensor.shape}"
            )
        if n_dirs is None:
            n_dirs = seed.shape[0]
        elif seed.shape[0] != n_dirs:
            raise AutodiffError("all seeds must share the same direction count")
        tangents[id(tensor)] = seed

    remaining: dict[int, int] = {}
    for node in tape.nodes:
        for tensor in node.inputs:
            key = id(tensor)
            remaining[key] = remaining.get(key, 0) + 1
    for out in outputs:
        remaining[id(out)] = remaining.get(id(out), 0) + 1

    for node in tape.nodes:
        in_tangents = [tangents.get(id(t)) for t in node.inputs]
        if any(t is not None for t in in_tangents):
            tangents[id(node.output)] = node.jvp(in_tangents, n_dirs)
        for tensor in node.inputs:
            key = id(tensor)
            remaining[key] -= 1
            if remaining[key] == 0 and key in tangents:
                del tangents[key]

    results = []
    for out in outputs:
        t = tangents.get(id(out))
        if t is None:
            t = np.zeros((n_dirs,) + out.shape)
        results.append(t)
    return results


def jvp(f, x, v) -> np.ndarray:
    """Directional derivative of ``f`` at ``x`` along ``v`` (single direction)."""
    x_t = as_tensor(np.asarray(x, dtype=np.float64))
    v = np.asarray(v, dtype=np.float64)
    if v.shape != x_t.shape:
        raise AutodiffError("tangent must match the input shape")
    with Tape() as tape:
        y = f(x_t)
    if not isinstance(y, Tensor):
        raise AutodiffError("traced function must return a Tensor")
    try:
        return forward_tangents(tape, {x_t: v[None]}, [y])[0][0]
    finally:
        tape.release()
