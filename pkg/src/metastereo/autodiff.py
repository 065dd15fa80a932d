"""Reverse-mode automatic differentiation on an explicit tape.

Every operation appends a node to the active :class:`Tape`. Node inputs
always precede the node itself, so walking node ids in descending order
is a reverse-topological traversal. Backward rules are written in terms
of the same differentiable primitives they differentiate, which means a
backward pass can itself be recorded on the tape and differentiated
again (gradients of gradients).

All data is 64-bit float. A tensor handed to a tape is treated as an
immutable snapshot; tensors and tapes are confined to one execution
context at a time.
"""
from __future__ import annotations

import weakref
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class NumericFault(ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration values."""


class Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of executed operations.

    A leaf node has no inputs and no backward rule; it marks a tensor
    that gradients may be requested for. `generation` counts how many
    backward passes have been recorded, distinguishing nested passes.

    Re-using a tensor from an old tape under a new one re-registers it
    as a leaf of the new tape; tapes are therefore used strictly
    sequentially, never interleaved.

    Tensors reference their tape through a shared weakref so the whole
    graph is cycle-free and dies by reference counting the moment the
    tape goes out of scope.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.generation = 0
        self._wref = weakref.ref(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False


class no_grad:
    """Context in which no operations are recorded."""

    def __enter__(self) -> "no_grad":
        _TAPE_STACK.append(None)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False


_TAPE_STACK: list[Tape | None] = [None]


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1]


class Tensor:
    """Dense float64 array, optionally recorded on the active tape.

    `tape` holds the tape's canonical weakref (identity-comparable),
    not the tape itself.
    """

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape: weakref.ref | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Same values, severed from any tape."""
        return Tensor(self.data)

    def copy(self, requires_grad: bool = False) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, c):
        return pow_const(self, c)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _register_leaf(t: Tensor, tape: Tape) -> int:
    nid = len(tape.nodes)
    tape.nodes.append(Node("leaf", (), None))
    t.tape = tape._wref
    t.node_id = nid
    return nid


def _make(op: str, data: np.ndarray, inputs: tuple, vjp) -> Tensor:
    """Create the output tensor, recording a node if any input is tracked."""
    out = Tensor(data)
    tape = _TAPE_STACK[-1]
    if tape is None:
        return out
    wref = tape._wref
    ids = []
    tracked = False
    for x in inputs:
        if x.tape is wref:
            ids.append(x.node_id)
            tracked = True
        elif x.requires_grad:
            ids.append(_register_leaf(x, tape))
            tracked = True
        else:
            ids.append(None)
    if not tracked:
        return out
    nid = len(tape.nodes)
    tape.nodes.append(Node(op, tuple(ids), vjp))
    out.tape = wref
    out.node_id = nid
    out.requires_grad = True
    return out


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape))


def zeros_like(t: Tensor) -> Tensor:
    return Tensor(np.zeros(t.shape))


def ones_like(t: Tensor) -> Tensor:
    return Tensor(np.ones(t.shape))


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a cotangent back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


# ---------------------------------------------------------------------------
# elementwise primitives

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape)

    return _make("sub", a.data - b.data, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)

    def vjp(g):
        return _unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape)

    return _make("mul", a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data / b.data

    def vjp(g):
        ga = div(g, b)
        gb = neg(div(mul(g, out), b))
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    out = _make("div", out_data, (a, b), vjp)
    return out


def neg(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (neg(g),)

    return _make("neg", -a.data, (a,), vjp)


def pow_const(a, c) -> Tensor:
    a = _wrap(a)
    c = float(c)

    def vjp(g):
        return (mul(g, mul(Tensor(c), pow_const(a, c - 1.0))),)

    return _make("pow", a.data ** c, (a,), vjp)


def sqrt(a) -> Tensor:
    return pow_const(a, 0.5)


def exp(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (mul(g, out),)

    out = _make("exp", np.exp(a.data), (a,), vjp)
    return out


def log(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (div(g, a),)

    return _make("log", np.log(a.data), (a,), vjp)


def tabs(a) -> Tensor:
    a = _wrap(a)
    s = np.sign(a.data)

    def vjp(g):
        return (mul(g, Tensor(s)),)

    return _make("abs", np.abs(a.data), (a,), vjp)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    x = a.data
    out_data = np.empty_like(x)
    pos = x >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out_data[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (mul(g, mul(out, sub(Tensor(1.0), out))),)

    out = _make("sigmoid", out_data, (a,), vjp)
    return out


def softplus(a) -> Tensor:
    a = _wrap(a)

    def vjp(g):
        return (mul(g, sigmoid(a)),)

    return _make("softplus", np.logaddexp(0.0, a.data), (a,), vjp)


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = _wrap(a)
    mask = np.where(a.data > 0, 1.0, slope)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _make("leaky_relu", a.data * mask, (a,), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is passed through strictly inside the range."""
    a = _wrap(a)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)

    def vjp(g):
        return (mul(g, Tensor(mask)),)

    return _make("clip", np.clip(a.data, lo, hi), (a,), vjp)


# ---------------------------------------------------------------------------
# shape and reduction primitives

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is not None and not isinstance(axis, tuple):
        axis = (axis,)
    if axis is not None:
        axis = tuple(ax % a.ndim for ax in axis)
    kept = None
    if axis is not None and not keepdims:
        kept = tuple(1 if i in axis else s for i, s in enumerate(a.shape))

    def vjp(g):
        if kept is not None:
            g = reshape(g, kept)
        elif axis is None and not keepdims:
            g = reshape(g, (1,) * a.ndim)
        if g.shape != a.shape:
            g = broadcast_to(g, a.shape)
        return (g,)

    return _make("sum", a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = 1
        for ax in axes:
            n *= a.shape[ax % a.ndim]
    return mul(tsum(a, axis=axis, keepdims=keepdims), Tensor(1.0 / n))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def vjp(g):
        return (_unbroadcast(g, a.shape),)

    return _make("broadcast", np.broadcast_to(a.data, shape).copy(), (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)

    def vjp(g):
        return (reshape(g, a.shape),)

    return _make("reshape", a.data.reshape(shape), (a,), vjp)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (transpose(g, inv),)

    return _make("transpose", np.transpose(a.data, axes), (a,), vjp)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def vjp(g):
        return matmul(g, transpose(b, (1, 0))), matmul(transpose(a, (1, 0)), g)

    return _make("matmul", a.data @ b.data, (a, b), vjp)


def take(a, idx: np.ndarray) -> Tensor:
    """Gather from the flattened input: out[j] = a.flat[idx[j]]."""
    a = _wrap(a)
    size = a.size

    def vjp(g):
        return (reshape(scatter_add(g, idx, size), a.shape),)

    return _make("take", a.data.reshape(-1)[idx], (a,), vjp)


def scatter_add(a, idx: np.ndarray, size: int) -> Tensor:
    """Scatter-add into a flat vector: out[i] = sum of a.flat where idx == i."""
    a = _wrap(a)
    if a.shape != idx.shape:
        raise ShapeError(f"scatter_add: value shape {a.shape} != index shape {idx.shape}")

    def vjp(g):
        return (take(g, idx),)

    data = np.bincount(idx.reshape(-1), weights=a.data.reshape(-1), minlength=size)
    return _make("scatter_add", data, (a,), vjp)


def zero_pad(a, widths) -> Tensor:
    a = _wrap(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)

    def vjp(g):
        return (crop(g, widths),)

    padded = np.zeros(tuple(s + lo + hi for (lo, hi), s in zip(widths, a.shape)))
    padded[tuple(slice(lo, lo + s) for (lo, _), s in zip(widths, a.shape))] = a.data
    return _make("pad", padded, (a,), vjp)


def crop(a, widths) -> Tensor:
    a = _wrap(a)
    widths = tuple((int(lo), int(hi)) for lo, hi in widths)
    slices = tuple(slice(lo, s - hi) for (lo, hi), s in zip(widths, a.shape))

    def vjp(g):
        return (zero_pad(g, widths),)

    return _make("crop", a.data[slices], (a,), vjp)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_wrap(p) for p in parts]
    axis = axis % parts[0].ndim
    sizes = [p.shape[axis] for p in parts]
    total = sum(sizes)
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        outs = []
        for i, p in enumerate(parts):
            widths = [(0, 0)] * p.ndim
            widths[axis] = (int(offsets[i]), int(total - offsets[i + 1]))
            outs.append(crop(g, widths))
        return tuple(outs)

    return _make("concat", np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


# ---------------------------------------------------------------------------
# differentiation

def grad(output: Tensor, params: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Gradients of a scalar output with respect to `params`.

    With ``create_graph=True`` the backward pass is recorded on the same
    tape and the returned gradients are themselves differentiable.
    Parameters that the output does not depend on get zero gradients.
    """
    if not isinstance(output, Tensor) or output.size != 1:
        raise ContractError("grad requires a scalar (single-element) output tensor")
    results: list[Tensor | None] = [None] * len(params)
    tape = output.tape() if output.tape is not None else None
    if tape is not None and output.node_id is not None:
        tape.generation += 1
        nodes = tape.nodes
        reach: set[int] = set()
        stack = [output.node_id]
        while stack:
            nid = stack.pop()
            if nid in reach:
                continue
            reach.add(nid)
            for i in nodes[nid].inputs:
                if i is not None and i not in reach:
                    stack.append(i)
        wanted: dict[int, list[int]] = {}
        for pos, p in enumerate(params):
            if p.tape is tape._wref and p.node_id in reach:
                wanted.setdefault(p.node_id, []).append(pos)
        cot: dict[int, Tensor] = {}
        _TAPE_STACK.append(tape if create_graph else None)
        try:
            cot[output.node_id] = Tensor(np.ones_like(output.data))
            for nid in sorted(reach, reverse=True):
                g = cot.pop(nid, None)
                if g is None:
                    continue
                positions = wanted.get(nid)
                if positions:
                    for pos in positions:
                        results[pos] = g
                node = nodes[nid]
                if node.vjp is None:
                    continue
                grads_in = node.vjp(g)
                for i, gi in zip(node.inputs, grads_in):
                    if i is None or gi is None:
                        continue
                    prev = cot.get(i)
                    cot[i] = gi if prev is None else add(prev, gi)
        finally:
            _TAPE_STACK.pop()
    out: list[Tensor] = []
    for pos, p in enumerate(params):
        r = results[pos]
        if r is None:
            out.append(Tensor(np.zeros(p.shape)))
        elif not create_graph:
            out.append(r.detach())
        else:
            out.append(r)
    return out
