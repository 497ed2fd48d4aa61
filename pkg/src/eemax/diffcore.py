"""Small reverse-mode autodiff over dense float64 numpy arrays.

Only the operations needed by the objective and InterferenceNet are provided.
Every op returns a new :class:`Tensor` holding its forward value and a closure
that pushes the output gradient back to its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, parents=(), op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = None
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None):
        return reduce_sum(self, axis)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    # never update in place: g may alias another node's gradient
    if t.grad is None:
        t.grad = np.reshape(g, t.shape)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    # sum out axes that numpy broadcasting added or stretched
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _node(data, parents, op, backward_fn) -> Tensor:
    out = Tensor(data, requires_grad=any(p.requires_grad for p in parents), parents=parents, op=op)
    if out.requires_grad:
        out._backward = backward_fn
    return out


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), "add", bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), "sub", bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), "mul", bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * out / b.data, b.shape))

    return _node(out, (a, b), "div", bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _node(-a.data, (a,), "neg", lambda g: _accum(a, -g))


def relu(a) -> Tensor:
    """max(a, 0); the subgradient at exactly 0 is 0."""
    a = as_tensor(a)
    mask = a.data > 0
    # np.maximum propagates NaN, so a diverged input is not silently zeroed
    return _node(np.maximum(a.data, 0.0), (a,), "relu", lambda g: _accum(a, g * mask))


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise max(a, floor) against a constant; gradient 0 where a <= floor."""
    a = as_tensor(a)
    mask = a.data > floor
    return _node(np.maximum(a.data, floor), (a,), "clamp_min", lambda g: _accum(a, g * mask))


def maximum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "maximum")
    mask = a.data > b.data

    def bw(g):
        _accum(a, _unbroadcast(g * mask, a.shape))
        _accum(b, _unbroadcast(g * ~mask, b.shape))

    return _node(np.maximum(a.data, b.data), (a, b), "maximum", bw)


def log(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), "log", lambda g: _accum(a, g / a.data))


def log1p(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log1p(a.data), (a,), "log1p", lambda g: _accum(a, g / (1.0 + a.data)))


def log10(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.log10(a.data), (a,), "log10", lambda g: _accum(a, g / (a.data * np.log(10.0))))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _node(np.cos(a.data), (a,), "cos", lambda g: _accum(a, -g * np.sin(a.data)))


def clip(a, lo: float, hi: float) -> Tensor:
    """Elementwise projection onto [lo, hi]; gradient passes only strictly inside."""
    a = as_tensor(a)
    mask = (a.data > lo) & (a.data < hi)
    return _node(np.clip(a.data, lo, hi), (a,), "clip", lambda g: _accum(a, g * mask))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), "square", lambda g: _accum(a, 2.0 * g * a.data))


# ---------------------------------------------------------------- reductions & shape


def reduce_sum(a, axis=None) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape))

    return _node(a.data.sum(axis=axis), (a,), "sum", bw)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return reduce_sum(a, axis) / float(n)


def take(a, idx) -> Tensor:
    """Basic indexing/slicing; backward scatters into a zero array."""
    a = as_tensor(a)

    def bw(g):
        full = np.zeros(a.shape)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        _accum(a, full)

    return _node(a.data[idx], (a,), "take", bw)


def _fancy(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: _accum(a, g.reshape(a.shape)))


def concat(parts, axis=0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    ref = parts[0].shape
    for p in parts[1:]:
        if len(p.shape) != len(ref) or any(
            x != y for k, (x, y) in enumerate(zip(p.shape, ref)) if k != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape} along axis {axis}")
    sizes = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        for p, gp in zip(parts, np.split(g, sizes, axis=axis)):
            _accum(p, gp)

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat", bw)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return _node(np.transpose(a.data, axes), (a,), "transpose", lambda g: _accum(a, np.transpose(g, inv)))


def masked_mean(a, axis) -> Tensor:
    """Mean over all *other* positions along ``axis``.

    Along the receiver axis this is E o A / (n - 1), along the transmitter
    axis A o E / (n - 1), with E = ones - identity.
    """
    a = as_tensor(a)
    n = a.shape[axis]
    if n < 2:
        raise ShapeError(f"masked_mean: axis {axis} of shape {a.shape} has fewer than 2 entries")

    def op(x):
        return (x.sum(axis=axis, keepdims=True) - x) / (n - 1)

    # the operator is symmetric, so backward applies it again
    return _node(op(a.data), (a,), "masked_mean", lambda g: _accum(a, op(g)))


def diagonal(a, axis1=-2, axis2=-1) -> Tensor:
    """numpy.diagonal semantics: the diagonal becomes the last axis."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[axis1] != a.shape[axis2]:
        raise ShapeError(f"diagonal: axes {axis1},{axis2} of {a.shape} are not square")
    n = a.shape[axis1]

    def bw(g):
        full = np.zeros(a.shape)
        moved = np.moveaxis(full, (axis1, axis2), (-2, -1))
        moved[..., np.arange(n), np.arange(n)] = g
        _accum(a, full)

    return _node(np.diagonal(a.data, axis1=axis1, axis2=axis2).copy(), (a,), "diagonal", bw)


# ---------------------------------------------------------------- contractions


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand einsum. Every index of an operand must appear in the other
    operand or in the output, so the backward rule is again an einsum."""
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_spec = spec.replace(" ", "").split("->")
    sa, sb = lhs.split(",")
    for s, t in ((sa, a), (sb, b)):
        core = len(s.replace("...", ""))
        if (t.ndim < core) if "..." in s else (t.ndim != core):
            raise ShapeError(f"einsum {spec}: operand shape {t.shape} does not match '{s}'")
    try:
        out = np.einsum(spec, a.data, b.data, optimize=True)
    except ValueError:
        raise ShapeError(f"einsum {spec}: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, np.einsum(f"{out_spec},{sb}->{sa}", g, b.data, optimize=True))
        if b.requires_grad:
            _accum(b, np.einsum(f"{out_spec},{sa}->{sb}", g, a.data, optimize=True))

    return _node(out, (a, b), "einsum", bw)


def matmul(a, b) -> Tensor:
    """np.matmul with broadcasting over leading axes (both operands >= 2-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))

    return _node(out, (a, b), "matmul", bw)


def matmul_first(W, F) -> Tensor:
    """W . F: apply W (out, in) to every feature vector F[..., :, i, j]."""
    W, F = as_tensor(W), as_tensor(F)
    if W.ndim != 2 or F.ndim < 3 or W.shape[1] != F.shape[-3]:
        raise ShapeError(f"matmul_first: weight {W.shape} incompatible with features {F.shape}")
    return einsum("oi,...ijk->...ojk", W, F)


def left_mul(P, F) -> Tensor:
    """P o F: multiply every trailing matrix F[..., :, :] by P from the left."""
    P, F = as_tensor(P), as_tensor(F)
    if P.ndim != 2 or F.ndim < 2 or P.shape[1] != F.shape[-2]:
        raise ShapeError(f"left_mul: matrix {P.shape} incompatible with {F.shape}")
    return einsum("ik,...kj->...ij", P, F)


def right_mul(F, P) -> Tensor:
    """F o P: multiply every trailing matrix F[..., :, :] by P from the right."""
    F, P = as_tensor(F), as_tensor(P)
    if P.ndim != 2 or F.ndim < 2 or P.shape[0] != F.shape[-1]:
        raise ShapeError(f"right_mul: matrix {P.shape} incompatible with {F.shape}")
    return einsum("...ik,kj->...ij", F, P)


def affine(w, x, b) -> Tensor:
    """w . x + b over the leading feature axis of x (shape (d, ...))."""
    w, x = as_tensor(w), as_tensor(x)
    if w.ndim != 1 or x.shape[0] != w.shape[0]:
        raise ShapeError(f"affine: weight {w.shape} incompatible with {x.shape}")
    return einsum("d,d...->...", w, x) + b


# ---------------------------------------------------------------- backward


def _topo(root: Tensor):
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, seed=1.0):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    order = _topo(root)
    for node in order:
        if node._parents:
            node.grad = None
    root.grad = np.full(root.shape, seed, dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad(root: Tensor, leaves):
    """Gradients of ``root`` w.r.t. ``leaves``; unreachable leaves get zeros."""
    for leaf in leaves:
        leaf.grad = None
    backward(root)
    return [np.zeros(l.shape) if l.grad is None else np.array(l.grad) for l in leaves]


# ---------------------------------------------------------------- finite differences


@dataclass
class FDReport:
    max_rel_err: float
    worst_index: tuple | None
    skipped: list = field(default_factory=list)
    checked: int = 0
    tol: float = 1e-5

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def fd_check(f, point, analytic=None, step=None, tol=1e-5, floor=1e-6, kink_tol=1e-3, coords=None):
    """Central-difference check of a scalar function.

    ``f`` maps an ndarray to a float. ``analytic`` is the claimed gradient
    (computed with :func:`grad` if omitted and ``f`` returns a Tensor).
    Coordinates whose one-sided slopes disagree are treated as kinks and
    skipped. Relative error is |ad - fd| / max(|ad|, |fd|, floor, noise / tol)
    where ``noise`` bounds the roundoff of the difference quotient, so
    discrepancies at roundoff level never count as failures.
    """
    x = np.array(point, dtype=np.float64)
    if analytic is None:
        leaf = Tensor(x.copy(), requires_grad=True)
        (analytic,) = grad(f(leaf), [leaf])
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)

    def val(z):
        v = f(z)
        return float(v.data) if isinstance(v, Tensor) else float(v)

    f0 = val(x)
    report = FDReport(max_rel_err=0.0, worst_index=None, tol=tol)
    indices = np.ndindex(x.shape) if coords is None else coords
    for idx in indices:
        h = step if step is not None else 1e-6 * max(1.0, abs(x[idx]))
        orig = x[idx]
        x[idx] = orig + h
        fp = val(x)
        x[idx] = orig - h
        fm = val(x)
        x[idx] = orig
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        central = (fp - fm) / (2 * h)
        if abs(fwd - bwd) > kink_tol * max(1.0, abs(central)):
            report.skipped.append(idx)
            continue
        ad = analytic[idx]
        # roundoff in the difference quotient sets the smallest meaningful scale
        noise = 16 * np.finfo(float).eps * max(abs(f0), abs(fp), abs(fm)) / h
        err = abs(ad - central) / max(abs(ad), abs(central), floor, noise / tol)
        report.checked += 1
        if err > report.max_rel_err:
            report.max_rel_err, report.worst_index = err, idx
    return report
