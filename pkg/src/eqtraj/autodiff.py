"""A small reverse-mode differentiation engine over numpy arrays.

Every operation accepts plain arrays or :class:`Var` objects.  When no input
is a ``Var`` the result is a plain ``np.ndarray`` and nothing is recorded, so
the same numerical code serves both evaluation and training::

    tape = Tape()
    w = tape.variable(np.ones(3))
    loss = ad.sum(ad.exp(w * x))
    tape.backward(loss)
    w.grad
"""
from __future__ import annotations

import string

import numpy as np


class Tape:
    """Records operations in creation order and replays their adjoints."""

    def __init__(self):
        self.nodes: list[Var] = []

    def variable(self, value) -> "Var":
        v = Var(np.array(value, dtype=float), self)
        self.nodes.append(v)
        return v

    def backward(self, out: "Var") -> None:
        if out.value.size != 1:
            raise ValueError("backward needs a scalar output")
        for node in self.nodes:
            node.grad = None
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not isinstance(parent, Var):
                    continue
                g = _unbroadcast(np.asarray(g, dtype=float), parent.value.shape)
                parent.grad = g if parent.grad is None else parent.grad + g


class Var:
    __slots__ = ("value", "grad", "tape", "_parents", "_backward")
    __array_priority__ = 100.0
    __array_ufunc__ = None

    def __init__(self, value, tape, parents=(), backward=None):
        self.value = value
        self.tape = tape
        self.grad = None
        self._parents = parents
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def value(x):
    return x.value if isinstance(x, Var) else x


def _tape_of(args):
    for a in args:
        if isinstance(a, Var):
            return a.tape
    return None


def _record(out, parents, backward):
    tape = _tape_of(parents)
    if tape is None:
        return out
    v = Var(out, tape, tuple(parents), backward)
    tape.nodes.append(v)
    return v


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    return _record(value(a) + value(b), (a, b), lambda g: (g, g))


def sub(a, b):
    return _record(value(a) - value(b), (a, b), lambda g: (g, -g))


def mul(a, b):
    va, vb = value(a), value(b)
    return _record(va * vb, (a, b), lambda g: (g * vb, g * va))


def div(a, b):
    va, vb = value(a), value(b)
    return _record(va / vb, (a, b), lambda g: (g / vb, -g * va / (vb * vb)))


def neg(a):
    return _record(-value(a), (a,), lambda g: (-g,))


def power(a, p: float):
    va = value(a)
    return _record(va**p, (a,), lambda g: (g * p * va ** (p - 1),))


def exp(a):
    out = np.exp(value(a))
    return _record(out, (a,), lambda g: (g * out,))


def log(a):
    va = value(a)
    return _record(np.log(va), (a,), lambda g: (g / va,))


def sqrt(a):
    out = np.sqrt(value(a))
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def sigmoid(a):
    out = 1.0 / (1.0 + np.exp(-value(a)))
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def silu(a):
    va = value(a)
    sg = 1.0 / (1.0 + np.exp(-va))
    return _record(va * sg, (a,), lambda g: (g * (sg + va * sg * (1.0 - sg)),))


def relu(a):
    va = value(a)
    return _record(np.maximum(va, 0.0), (a,), lambda g: (g * (va > 0),))


def where(cond, a, b):
    cond = np.asarray(cond, dtype=bool)
    return _record(np.where(cond, value(a), value(b)), (a, b),
                   lambda g: (np.where(cond, g, 0.0), np.where(cond, 0.0, g)))


# ---------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    va = value(a)
    out = np.sum(va, axis=axis, keepdims=keepdims)

    def back(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = (axis,) if np.isscalar(axis) else axis
            axes = sorted(ax % va.ndim for ax in axes)
            for ax in axes:
                g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, va.shape),)

    return _record(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    va = value(a)
    if axis is None:
        count = va.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        count = int(np.prod([va.shape[ax] for ax in axes]))
    return sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


# ---------------------------------------------------------------- shape

def reshape(a, shape):
    va = value(a)
    return _record(va.reshape(shape), (a,), lambda g: (g.reshape(va.shape),))


def transpose(a, axes):
    inv = np.argsort(axes)
    return _record(np.transpose(value(a), axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(a, idx):
    va = value(a)

    def back(g):
        out = np.zeros_like(va)
        if _is_basic(idx):
            out[idx] += g
        else:
            # scatter-add through flat positions; bincount is much faster than np.add.at
            flat = np.arange(va.size).reshape(va.shape)[idx]
            out = np.bincount(flat.ravel(), weights=np.broadcast_to(g, flat.shape).ravel(),
                              minlength=va.size).reshape(va.shape)
        return (out,)

    return _record(va[idx], (a,), back)


def concat(arrays, axis=0):
    vals = [value(x) for x in arrays]
    out = np.concatenate(vals, axis=axis)
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(out, tuple(arrays), back)


def stack(arrays, axis=0):
    vals = [value(x) for x in arrays]
    out = np.stack(vals, axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(vals)))

    return _record(out, tuple(arrays), back)


# ---------------------------------------------------------------- einsum

_LETTERS = string.ascii_letters


def _expand_ellipsis(spec, shapes):
    lhs, rhs = spec.replace(" ", "").split("->")
    terms = lhs.split(",")
    used = set(spec) - set(".,->")
    free = [c for c in _LETTERS if c not in used]
    ell_len = 0
    for term, shp in zip(terms, shapes):
        if "..." in term:
            ell_len = max(ell_len, len(shp) - (len(term) - 3))
    ell = "".join(free[:ell_len])
    out_terms = []
    for term, shp in zip(terms, shapes):
        if "..." in term:
            n = len(shp) - (len(term) - 3)
            term = term.replace("...", ell[ell_len - n:])
        out_terms.append(term)
    rhs = rhs.replace("...", ell)
    return out_terms, rhs


def _pair(ta, a, tb, b, keep):
    """Contract two operands with one batched matmul; ``keep`` lists the output letters."""
    drop_a = [c for c in ta if c not in tb and c not in keep]
    if drop_a:
        ta2 = "".join(c for c in ta if c not in drop_a)
        a, ta = np.einsum(f"{ta}->{ta2}", a), ta2
    drop_b = [c for c in tb if c not in ta and c not in keep]
    if drop_b:
        tb2 = "".join(c for c in tb if c not in drop_b)
        b, tb = np.einsum(f"{tb}->{tb2}", b), tb2
    size = {}
    for t, v in ((ta, a), (tb, b)):
        for c, n in zip(t, v.shape):
            size[c] = max(size.get(c, 1), n)
    batch = [c for c in ta if c in tb and c in keep]
    summed = [c for c in ta if c in tb and c not in keep]
    left = [c for c in ta if c not in tb]
    right = [c for c in tb if c not in ta]
    if not summed:
        out_t = "".join(batch + left + right)
        return np.einsum(f"{ta},{tb}->{out_t}", a, b), out_t
    prod = lambda cs: int(np.prod([size[c] for c in cs], dtype=np.int64))
    a = np.broadcast_to(a, [size[c] for c in ta]).transpose([ta.index(c) for c in batch + left + summed])
    b = np.broadcast_to(b, [size[c] for c in tb]).transpose([tb.index(c) for c in batch + summed + right])
    out = np.matmul(a.reshape(prod(batch), prod(left), prod(summed)),
                    b.reshape(prod(batch), prod(summed), prod(right)))
    return out.reshape([size[c] for c in batch + left + right]), "".join(batch + left + right)


def contract(terms, rhs, vals):
    """Evaluate an explicit einsum as a chain of batched matmuls."""
    terms, vals = list(terms), list(vals)
    if len(terms) > 1:
        spec = ",".join(terms) + "->" + rhs
        path = np.einsum_path(spec, *vals, optimize="greedy")[0][1:]
        for step in path:
            if len(step) != 2:
                return np.einsum(spec, *vals)
            i, j = sorted(step)
            tb, b = terms.pop(j), vals.pop(j)
            ta, a = terms.pop(i), vals.pop(i)
            keep = set(rhs).union(*terms)
            v, t = _pair(ta, a, tb, b, keep)
            terms.append(t)
            vals.append(v)
    return np.einsum(f"{terms[0]}->{rhs}", vals[0])


def einsum(spec, *operands):
    """``np.einsum`` with gradients.

    Subscripts may use a leading ellipsis; repeated letters inside one
    operand are not supported.
    """
    vals = [value(o) for o in operands]
    terms, rhs = _expand_ellipsis(spec, [v.shape for v in vals])
    out = contract(terms, rhs, vals)

    def back(g):
        grads = []
        for k, (term, op) in enumerate(zip(terms, operands)):
            if not isinstance(op, Var):
                grads.append(None)
                continue
            others = [t for i, t in enumerate(terms) if i != k]
            other_vals = [v for i, v in enumerate(vals) if i != k]
            avail = set(rhs).union(*others) if others else set(rhs)
            target = "".join(c for c in term if c in avail)
            gk = contract([rhs] + others, target, [g] + other_vals)
            if target != term:
                shape = [vals[k].shape[i] if c in avail else 1 for i, c in enumerate(term)]
                gk = np.broadcast_to(gk.reshape(shape), vals[k].shape)
            grads.append(gk)
        return tuple(grads)

    return _record(out, tuple(operands), back)


def matmul2(a, b):
    """Batched matrix product over the last two axes."""
    return einsum("...ij,...jk->...ik", a, b)


def swap_last(a):
    nd = value(a).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)
