"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Var` records one primitive operation and its parents; gradients
are propagated by walking the recorded graph backwards. Every VJP rule is
written in terms of the same polymorphic primitives, so a backward pass run
with ``create_graph=True`` emits a differentiable graph itself — nested
derivatives (input Jacobians inside parameter gradients, second derivatives
of network outputs) need no special casing. With ``create_graph=False`` the
same rules execute on raw arrays.

The primitive set is exactly what the models and losses require (arithmetic,
tanh/trig/log, matmul, linear solve, reductions, indexing); generality is a
non-goal.
"""

from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Union

import numpy as np

ArrayLike = Union[np.ndarray, float, int]


class UnregisteredPrimitiveError(TypeError):
    """An operation was applied to objects the engine cannot differentiate."""


class Var:
    """A recorded array value; leaves carry no parents."""

    __slots__ = ("value", "parents", "rule", "op")

    def __init__(self, value, parents=(), rule=None, op="leaf"):
        self.value = np.asarray(value, dtype=float)
        self.parents = parents
        self.rule = rule
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    # Arithmetic sugar; every path funnels into the primitives below.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"


def _check(x):
    if isinstance(x, (Var, np.ndarray, float, int, np.floating, np.integer)):
        return
    raise UnregisteredPrimitiveError(f"cannot differentiate through {type(x).__name__}")


def val(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=float)


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _shape(x):
    return val(x).shape


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def _unbroadcast(g, shape):
    """Sum a cotangent down to ``shape`` (the reverse of numpy broadcasting)."""
    g_shape = _shape(g)
    if g_shape == tuple(shape):
        return g
    while len(_shape(g)) > len(shape):
        g = sum_(g, axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(_shape(g), shape)) if s == 1 and gs != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


def add(a, b):
    _check(a), _check(b)
    if not _is_var(a, b):
        return val(a) + val(b)
    sa, sb = _shape(a), _shape(b)
    return Var(
        val(a) + val(b),
        parents=tuple(p for p in (a, b) if isinstance(p, Var)),
        rule=lambda g, out, *ps: tuple(
            _unbroadcast(g, s) for p, s in ((a, sa), (b, sb)) if isinstance(p, Var)
        ),
        op="add",
    )


def sub(a, b):
    return add(a, mul(-1.0, b)) if _is_var(a, b) else val(a) - val(b)


def neg(a):
    return mul(-1.0, a)


def mul(a, b):
    _check(a), _check(b)
    if not _is_var(a, b):
        return val(a) * val(b)
    parents = tuple(p for p in (a, b) if isinstance(p, Var))

    def rule(g, out, *ps):
        # ps mirrors `parents`; the non-Var factor is captured by value.
        lookup = dict(zip((id(p) for p in parents), ps))
        av = lookup.get(id(a), val(a))
        bv = lookup.get(id(b), val(b))
        outs = []
        if isinstance(a, Var):
            outs.append(_unbroadcast(mul(g, bv), _shape(a)))
        if isinstance(b, Var):
            outs.append(_unbroadcast(mul(g, av), _shape(b)))
        return tuple(outs)

    return Var(val(a) * val(b), parents=parents, rule=rule, op="mul")


def div(a, b):
    return mul(a, reciprocal(b)) if _is_var(a, b) else val(a) / val(b)


def reciprocal(a):
    _check(a)
    if not _is_var(a):
        return 1.0 / val(a)
    return Var(
        1.0 / a.value,
        parents=(a,),
        rule=lambda g, out, p: (neg(mul(g, square(out))),),
        op="reciprocal",
    )


def square(a):
    _check(a)
    if not _is_var(a):
        return val(a) ** 2
    return Var(a.value**2, parents=(a,), rule=lambda g, out, p: (mul(g, mul(2.0, p)),), op="square")


def pow_const(a, exponent: float):
    _check(a)
    if not _is_var(a):
        return val(a) ** exponent
    return Var(
        a.value**exponent,
        parents=(a,),
        rule=lambda g, out, p: (mul(g, mul(exponent, pow_const(p, exponent - 1.0))),),
        op="pow",
    )


def sqrt(a):
    _check(a)
    if not _is_var(a):
        return np.sqrt(val(a))
    return Var(
        np.sqrt(a.value),
        parents=(a,),
        rule=lambda g, out, p: (mul(g, mul(0.5, reciprocal(out))),),
        op="sqrt",
    )


def tanh(a):
    _check(a)
    if not _is_var(a):
        return np.tanh(val(a))
    return Var(
        np.tanh(a.value),
        parents=(a,),
        rule=lambda g, out, p: (mul(g, sub(1.0, square(out))),),
        op="tanh",
    )


def sin(a):
    _check(a)
    if not _is_var(a):
        return np.sin(val(a))
    return Var(np.sin(a.value), parents=(a,), rule=lambda g, out, p: (mul(g, cos(p)),), op="sin")


def cos(a):
    _check(a)
    if not _is_var(a):
        return np.cos(val(a))
    return Var(
        np.cos(a.value), parents=(a,), rule=lambda g, out, p: (neg(mul(g, sin(p))),), op="cos"
    )


def exp(a):
    _check(a)
    if not _is_var(a):
        return np.exp(val(a))
    return Var(np.exp(a.value), parents=(a,), rule=lambda g, out, p: (mul(g, out),), op="exp")


def log(a):
    _check(a)
    if not _is_var(a):
        return np.log(val(a))
    return Var(np.log(a.value), parents=(a,), rule=lambda g, out, p: (div(g, p),), op="log")


def log10(a):
    return div(log(a), float(np.log(10.0)))


def matmul(a, b):
    _check(a), _check(b)
    av, bv = val(a), val(b)
    if av.ndim < 2 or bv.ndim < 2:
        raise UnregisteredPrimitiveError("matmul operands must have ndim >= 2")
    if not _is_var(a, b):
        return av @ bv
    parents = tuple(p for p in (a, b) if isinstance(p, Var))
    sa, sb = av.shape, bv.shape

    def rule(g, out, *ps):
        lookup = dict(zip((id(p) for p in parents), ps))
        aa = lookup.get(id(a), av)
        bb = lookup.get(id(b), bv)
        outs = []
        if isinstance(a, Var):
            outs.append(_unbroadcast(matmul(g, swapaxes(bb, -1, -2)), sa))
        if isinstance(b, Var):
            outs.append(_unbroadcast(matmul(swapaxes(aa, -1, -2), g), sb))
        return tuple(outs)

    return Var(av @ bv, parents=parents, rule=rule, op="matmul")


def sum_(a, axis=None, keepdims=False):
    _check(a)
    if not _is_var(a):
        return np.sum(val(a), axis=axis, keepdims=keepdims)
    shape = a.value.shape

    def rule(g, out, p):
        if axis is None:
            return (broadcast_to(reshape(g, (1,) * len(shape)), shape),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(ax % len(shape) for ax in axes)
        if not keepdims:
            kept = [1 if i in axes else s for i, s in enumerate(shape)]
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, shape),)

    return Var(np.sum(a.value, axis=axis, keepdims=keepdims), parents=(a,), rule=rule, op="sum")


def mean(a, axis=None, keepdims=False):
    shape = _shape(a)
    if axis is None:
        n = int(np.prod(shape))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([shape[ax] for ax in axes]))
    return div(sum_(a, axis=axis, keepdims=keepdims), float(n))


def broadcast_to(a, shape):
    _check(a)
    if not _is_var(a):
        return np.broadcast_to(val(a), shape).copy()
    src = a.value.shape
    return Var(
        np.broadcast_to(a.value, shape).copy(),
        parents=(a,),
        rule=lambda g, out, p: (_unbroadcast(g, src),),
        op="broadcast",
    )


def reshape(a, shape):
    _check(a)
    if not _is_var(a):
        return val(a).reshape(shape)
    src = a.value.shape
    return Var(
        a.value.reshape(shape),
        parents=(a,),
        rule=lambda g, out, p: (reshape(g, src),),
        op="reshape",
    )


def swapaxes(a, ax1, ax2):
    _check(a)
    if not _is_var(a):
        return np.swapaxes(val(a), ax1, ax2)
    return Var(
        np.swapaxes(a.value, ax1, ax2),
        parents=(a,),
        rule=lambda g, out, p: (swapaxes(g, ax1, ax2),),
        op="swapaxes",
    )


def getitem(a, idx):
    _check(a)
    if not _is_var(a):
        return val(a)[idx]
    shape = a.value.shape
    return Var(
        a.value[idx],
        parents=(a,),
        rule=lambda g, out, p: (scatter(g, idx, shape),),
        op="getitem",
    )


def scatter(values, idx, shape):
    """Zeros of ``shape`` with ``values`` added at ``idx`` (adjoint of getitem)."""
    _check(values)
    if not _is_var(values):
        out = np.zeros(shape)
        np.add.at(out, idx, val(values))
        return out
    out = np.zeros(shape)
    np.add.at(out, idx, values.value)
    return Var(
        out,
        parents=(values,),
        rule=lambda g, out_, p: (getitem(g, idx),),
        op="scatter",
    )


def concat(parts: Sequence, axis=0):
    parts = list(parts)
    for p in parts:
        _check(p)
    if not _is_var(*parts):
        return np.concatenate([val(p) for p in parts], axis=axis)
    sizes = [_shape(p)[axis] for p in parts]
    offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
    var_parents = tuple(p for p in parts if isinstance(p, Var))

    def rule(g, out, *ps):
        outs = []
        for i, p in enumerate(parts):
            if not isinstance(p, Var):
                continue
            sl = [slice(None)] * len(_shape(out))
            sl[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(getitem(g, tuple(sl)))
        return tuple(outs)

    return Var(
        np.concatenate([val(p) for p in parts], axis=axis),
        parents=var_parents,
        rule=rule,
        op="concat",
    )


def stack(parts: Sequence, axis=0):
    return concat([reshape(p, _expanded_shape(p, axis)) for p in parts], axis=axis)


def _expanded_shape(p, axis):
    s = list(_shape(p))
    s.insert(axis if axis >= 0 else len(s) + 1 + axis, 1)
    return tuple(s)


def _np_solve(av, bv):
    # numpy 2 treats (..., M) right-hand sides as matrices; batched vector
    # systems go through an explicit trailing unit axis.
    if bv.ndim == av.ndim - 1:
        return np.linalg.solve(av, bv[..., None])[..., 0]
    return np.linalg.solve(av, bv)


def solve(a, b):
    """Batched dense solve; gradients flow through both operands.

    The adjoint uses the transposed system (no explicit inverse):
    ``gb = solve(A^T, g)`` and ``gA = -gb x^T``.
    """
    _check(a), _check(b)
    av, bv = val(a), val(b)
    if not _is_var(a, b):
        return _np_solve(av, bv)
    x = _np_solve(av, bv)
    parents = tuple(p for p in (a, b) if isinstance(p, Var))
    vector_rhs = bv.ndim == av.ndim - 1

    def rule(g, out, *ps):
        lookup = dict(zip((id(p) for p in parents), ps))
        aa = lookup.get(id(a), av)
        gb = solve(swapaxes(aa, -1, -2), g)
        outs = []
        if isinstance(a, Var):
            xo = out
            if vector_rhs:
                ga = neg(
                    mul(
                        reshape(gb, _shape(gb) + (1,)),
                        reshape(xo, _shape(xo)[:-1] + (1,) + _shape(xo)[-1:]),
                    )
                )
            else:
                ga = neg(matmul(gb, swapaxes(xo, -1, -2)))
            outs.append(_unbroadcast(ga, av.shape))
        if isinstance(b, Var):
            outs.append(_unbroadcast(gb, bv.shape))
        return tuple(outs)

    return Var(x, parents=parents, rule=rule, op="solve")


def where_mask(mask: np.ndarray, a, b):
    """Select per element with a constant (non-differentiated) mask."""
    _check(a), _check(b)
    mask = np.asarray(mask)
    if not _is_var(a, b):
        return np.where(mask, val(a), val(b))
    fm = mask.astype(float)
    return add(mul(fm, a), mul(1.0 - fm, b))


def stop_gradient(a):
    return val(a).copy()


def var(value, op="leaf") -> Var:
    return Var(np.asarray(value, dtype=float), op=op)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def _toposort(root: Var) -> List[Var]:
    order: List[Var] = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(
    out: Var,
    wrt: Sequence[Var],
    cotangent: Optional[ArrayLike] = None,
    create_graph: bool = False,
):
    """Cotangents of ``out`` with respect to each Var in ``wrt``.

    With ``create_graph=True`` the returned cotangents are Vars recorded on
    the graph, so they can be differentiated again (nesting depth is limited
    only by cost).
    """
    if not isinstance(out, Var):
        raise UnregisteredPrimitiveError("backward target must be a Var")
    seed = np.ones_like(out.value) if cotangent is None else np.asarray(cotangent, dtype=float)
    cot = {id(out): Var(seed) if create_graph else seed}
    keep = {id(w) for w in wrt}

    for node in reversed(_toposort(out)):
        g = cot.pop(id(node), None)
        if g is None or node.rule is None:
            if g is not None and id(node) in keep:
                cot[id(node)] = g
            continue
        if id(node) in keep:
            cot[id(node)] = g
        parent_args = node.parents if create_graph else tuple(p.value for p in node.parents)
        out_arg = node if create_graph else node.value
        grads = node.rule(g, out_arg, *parent_args)
        for parent, pg in zip(node.parents, grads):
            if pg is None:
                continue
            prev = cot.get(id(parent))
            cot[id(parent)] = pg if prev is None else add(prev, pg)

    results = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            g = Var(np.zeros_like(w.value)) if create_graph else np.zeros_like(w.value)
        results.append(g)
    return results


# ---------------------------------------------------------------------------
# Derivative drivers
# ---------------------------------------------------------------------------


def input_jacobian(f: Callable[[Var], Var], z: np.ndarray) -> np.ndarray:
    """Exact Jacobian of a vector function at ``z`` (one backward per output)."""
    zv = var(z)
    out = f(zv)
    if not isinstance(out, Var):
        raise UnregisteredPrimitiveError("function escaped the recorded primitives")
    m = out.value.size
    rows = []
    flat = reshape(out, (m,))
    for i in range(m):
        (g,) = backward(flat[i], [zv])
        rows.append(g)
    return np.stack(rows)


def second_order_eval(f: Callable[[Var], Var], z: np.ndarray) -> np.ndarray:
    """All second partials of a vector function, shape (m, n, n)."""
    zv = var(z)
    out = f(zv)
    m, n = out.value.size, zv.value.size
    flat = reshape(out, (m,))
    hess = np.zeros((m, n, n))
    for i in range(m):
        (g,) = backward(flat[i], [zv], create_graph=True)
        for k in range(n):
            (row,) = backward(g[k], [zv])
            hess[i, k, :] = row
    return hess


def value_and_grad(f: Callable[..., Var], params: Sequence[np.ndarray]):
    """Evaluate a scalar loss over parameter arrays and its reverse-mode gradient."""
    leaves = [var(p) for p in params]
    out = f(*leaves)
    if not isinstance(out, Var) or out.value.size != 1:
        raise UnregisteredPrimitiveError("loss must be a scalar Var")
    grads = backward(out, leaves)
    return float(out.value), grads


def parameter_gradient(loss: Var, params: Sequence[Var]) -> List[np.ndarray]:
    """Reverse-mode gradient of a recorded scalar loss for explicit leaves."""
    if loss.value.size != 1:
        raise UnregisteredPrimitiveError("loss must be scalar")
    return backward(loss, params)


def elementwise_jacobian(out: Var, inp: Var, create_graph: bool = False):
    """Per-sample Jacobian d out[n, i] / d inp[n, j] for batched, sample-wise maps.

    Requires out[n] to depend on inp[n] only; returns (N, m, n) as a list of
    m cotangents stacked on axis 1.
    """
    n_out = out.value.shape[1]
    cols = []
    for i in range(n_out):
        seed = np.zeros_like(out.value)
        seed[:, i] = 1.0
        (g,) = backward(out, [inp], cotangent=seed, create_graph=create_graph)
        cols.append(g)
    return stack(cols, axis=1)
