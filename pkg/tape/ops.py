"""Differentiable primitives.

Every primitive accepts Nodes, numpy arrays or Python scalars. When no
argument is a Node the result is a plain ndarray and nothing is recorded,
which is the fast path for untracked fixed-point iterations.
"""

import numpy as np

from .graph import Node, ShapeMismatchError, TapeError, detach, value_of


def _emit(op, value, args, backward):
    nodes = [a for a in args if isinstance(a, Node)]
    if not nodes:
        return value
    tapes = {id(n.tape): n.tape for n in nodes if n.tape is not None}
    if not tapes:
        return Node(value, op=op)
    if len(tapes) > 1:
        raise TapeError(f"{op}: operands recorded on different tapes")
    tape = next(iter(tapes.values()))
    parents = tuple(a if isinstance(a, Node) else None for a in args)
    return tape.record(value, op, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None


# elementwise binary

def add(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_check("add", av, bv)

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)

    return _emit("add", av + bv, (a, b), backward)


def sub(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_check("sub", av, bv)

    def backward(g):
        return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)

    return _emit("sub", av - bv, (a, b), backward)


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_check("mul", av, bv)

    def backward(g):
        return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)

    return _emit("mul", av * bv, (a, b), backward)


def div(a, b):
    av, bv = value_of(a), value_of(b)
    _broadcast_check("div", av, bv)
    out = av / bv

    def backward(g):
        return _unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)

    return _emit("div", out, (a, b), backward)


def neg(a):
    return _emit("neg", -value_of(a), (a,), lambda g: (-g,))


# products and reductions

def matmul(a, b):
    av, bv = value_of(a), value_of(b)
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatchError("matmul", av.shape, bv.shape)

    def backward(g):
        if av.ndim == 2 and bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        if av.ndim == 1 and bv.ndim == 2:
            return bv @ g, np.outer(av, g)
        if av.ndim == 1:
            return g * bv, g * av
        return g @ bv.T, av.T @ g

    return _emit("matmul", av @ bv, (a, b), backward)


def dot(a, b):
    av, bv = value_of(a), value_of(b)
    if av.shape != bv.shape or av.ndim != 1:
        raise ShapeMismatchError("dot", av.shape, bv.shape)
    return matmul(a, b)


def sum(a, axis=None):
    av = value_of(a)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape).copy(),)

    return _emit("sum", np.sum(av, axis=axis), (a,), backward)


# elementwise unary

def tanh(a):
    out = np.tanh(value_of(a))
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a):
    out = np.exp(value_of(a))
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a):
    av = value_of(a)
    return _emit("log", np.log(av), (a,), lambda g: (g / av,))


def sin(a):
    av = value_of(a)
    return _emit("sin", np.sin(av), (a,), lambda g: (g * np.cos(av),))


def cos(a):
    av = value_of(a)
    return _emit("cos", np.cos(av), (a,), lambda g: (-g * np.sin(av),))


def tan(a):
    av = value_of(a)
    out = np.tan(av)
    return _emit("tan", out, (a,), lambda g: (g * (1.0 + out * out),))


def power(a, k: float):
    """Elementwise a**k for a constant exponent."""
    av = value_of(a)
    k = float(k)

    def backward(g):
        return (g * k * np.power(av, k - 1.0),)

    return _emit("power", np.power(av, k), (a,), backward)


def square(a):
    return power(a, 2.0)


def clamp(x, lo=None, hi=None):
    """Clip into [lo, hi]; lo and hi may themselves be differentiable.

    Subgradient is 1 strictly inside or on the boundary, 0 outside, with the
    clipped-away mass routed to whichever bound was active.
    """
    xv = value_of(x)
    lov = None if lo is None else value_of(lo)
    hiv = None if hi is None else value_of(hi)
    out = xv
    below = np.zeros(xv.shape, dtype=bool)
    above = np.zeros(xv.shape, dtype=bool)
    if lov is not None:
        _broadcast_check("clamp", xv, lov)
        below = xv < lov
        out = np.maximum(out, lov)
    if hiv is not None:
        _broadcast_check("clamp", xv, hiv)
        above = xv > hiv
        out = np.minimum(out, hiv)
    out = np.broadcast_to(out, xv.shape).copy()
    inside = ~(below | above)

    def backward(g):
        glo = None if lov is None else _unbroadcast(np.where(below, g, 0.0), lov.shape)
        ghi = None if hiv is None else _unbroadcast(np.where(above, g, 0.0), hiv.shape)
        return np.where(inside, g, 0.0), glo, ghi

    return _emit("clamp", out, (x, lo, hi), backward)


# structure

def concat(items, axis=0):
    items = list(items)
    values = [value_of(a) for a in items]
    try:
        out = np.concatenate(values, axis=axis)
    except ValueError:
        raise ShapeMismatchError("concat", *(v.shape for v in values)) from None
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", out, tuple(items), backward)


def stack(items):
    items = list(items)
    values = [value_of(a) for a in items]
    try:
        out = np.stack(values)
    except ValueError:
        raise ShapeMismatchError("stack", *(v.shape for v in values)) from None

    def backward(g):
        return tuple(g[i] for i in range(len(items)))

    return _emit("stack", out, tuple(items), backward)


def index(a, key):
    av = value_of(a)
    try:
        out = np.array(av[key], dtype=np.float64)
    except IndexError:
        raise ShapeMismatchError("index", av.shape) from None

    def backward(g):
        full = np.zeros_like(av)
        np.add.at(full, key, g)
        return (full,)

    return _emit("index", out, (a,), backward)


def reshape(a, shape):
    av = value_of(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeMismatchError("reshape", av.shape, tuple(np.atleast_1d(shape))) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def mark(a, tag="T"):
    """Identity that tags its output; sweeps count traversed "T" tags."""
    node = _emit("mark", value_of(a).copy(), (a,), lambda g: (g,))
    if isinstance(node, Node):
        node.tag = tag
    return node


def custom_vjp(a, pullback, op="custom_vjp"):
    """Identity in the forward pass; the sweep applies `pullback` to cotangents."""
    return _emit(op, value_of(a).copy(), (a,), lambda g: (np.asarray(pullback(g), dtype=np.float64),))


def _rsub(self, other):
    return sub(other, self)


def _rdiv(self, other):
    return div(other, self)


def _pow(self, k):
    if isinstance(k, Node):
        raise TypeError("exponent must be a constant")
    return power(self, k)


Node.__add__ = add
Node.__radd__ = lambda self, other: add(other, self)
Node.__sub__ = sub
Node.__rsub__ = _rsub
Node.__mul__ = mul
Node.__rmul__ = lambda self, other: mul(other, self)
Node.__truediv__ = div
Node.__rtruediv__ = _rdiv
Node.__neg__ = neg
Node.__matmul__ = matmul
Node.__rmatmul__ = lambda self, other: matmul(other, self)
Node.__pow__ = _pow
Node.__getitem__ = index

__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "dot", "sum", "tanh", "exp", "log",
    "sin", "cos", "tan", "power", "square", "clamp", "concat", "stack", "index",
    "reshape", "mark", "custom_vjp", "detach",
]
