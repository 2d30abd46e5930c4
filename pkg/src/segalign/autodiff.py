"""Reverse-mode automatic differentiation over dense numpy tensors.

The operation set is exactly what the alignment losses need: elementwise
arithmetic, matmul/matvec/dot, reductions, softmax and logsumexp over the
last axis, slice/concat/reshape/gather, explicit row- and column-vector
promotion, and a stop-gradient barrier.  The graph is implicit: each Tensor
records its parent tensors plus a closure mapping the output gradient to
parent gradients.  `backward` topologically orders the reachable subgraph,
visits every node exactly once, and accumulates leaf gradients additively.

Two precisions are supported: float64 for gradient verification, float32 for
training throughput.  Binary ops demand matching dtypes and identical shapes;
the only implicit promotion is scalar-with-tensor.  Row/column promotion goes
through the explicit `add_rowvec` / `add_colvec` / `scale_colvec` ops.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)

_state = threading.local()


def _grad_enabled() -> bool:
    return not getattr(_state, "no_grad", False)


class no_grad:
    """Context manager: ops built inside record no graph (inference mode)."""

    def __enter__(self):
        self._prev = getattr(_state, "no_grad", False)
        _state.no_grad = True
        return self

    def __exit__(self, *exc):
        _state.no_grad = self._prev
        return False


class Tensor:
    """Dense real tensor participating in the implicit autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_rg")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._rg = self.requires_grad

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return stop_gradient(self)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_coerce(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, shape):
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def _coerce(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.op = op
    rg = _grad_enabled() and any(p._rg for p in parents)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    out._rg = rg
    return out


def _check_same_dtype(op, a: Tensor, b: Tensor):
    if a.data.dtype != b.data.dtype:
        raise ShapeError(op, a.shape, b.shape, detail=f"dtype {a.data.dtype} vs {b.data.dtype}")


def _binary_shapes(op, a: Tensor, b: Tensor):
    # identical shapes, or one operand scalar; anything else is rejected
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(op, a.shape, b.shape)


def _reduce_for(t: Tensor, g: np.ndarray) -> np.ndarray:
    # gradient of a scalar operand of a broadcasted elementwise op
    if t.shape == () and g.shape != ():
        return g.sum()
    return g


# -- elementwise arithmetic -------------------------------------------------


def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_same_dtype("add", a, b)
    _binary_shapes("add", a, b)

    def backward(g):
        return (_reduce_for(a, g), _reduce_for(b, g))

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_same_dtype("sub", a, b)
    _binary_shapes("sub", a, b)

    def backward(g):
        return (_reduce_for(a, g), _reduce_for(b, -g))

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_same_dtype("mul", a, b)
    _binary_shapes("mul", a, b)
    ad, bd = a.data, b.data

    def backward(g):
        return (_reduce_for(a, g * bd), _reduce_for(b, g * ad))

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _coerce(a, b.dtype)
    b = b if isinstance(b, Tensor) else _coerce(b, a.dtype)
    _check_same_dtype("div", a, b)
    _binary_shapes("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_reduce_for(a, g / bd), _reduce_for(b, -g * out / bd))

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        return (-g,)

    return _make(-a.data, (a,), backward, "neg")


def power(a: Tensor, exponent) -> Tensor:
    if isinstance(exponent, Tensor):
        raise ShapeError("pow", a.shape, exponent.shape, detail="exponent must be a python scalar")
    p = float(exponent)
    ad = a.data
    out = ad**p

    def backward(g):
        return (g * p * ad ** (p - 1.0),)

    return _make(out, (a,), backward, "pow")


def texp(a: Tensor) -> Tensor:
    if not np.all(np.isfinite(a.data)):
        raise DomainError(f"exp: non-finite input at flat index {_first_nonfinite(a.data)}")
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def tlog(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        idx = int(np.argmax(a.data.reshape(-1) <= 0))
        raise DomainError(f"log: non-positive input {a.data.reshape(-1)[idx]} at flat index {idx}")
    ad = a.data

    def backward(g):
        return (g / ad,)

    return _make(np.log(ad), (a,), backward, "log")


def tsqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        idx = int(np.argmax(a.data.reshape(-1) < 0))
        raise DomainError(f"sqrt: negative input at flat index {idx}")
    out = np.sqrt(a.data)

    def backward(g):
        return (g * 0.5 / out,)

    return _make(out, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make(a.data * mask, (a,), backward, "relu")


# -- linear algebra ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T, ad.T @ g)

    return _make(ad @ bd, (a, b), backward, "matmul")


def matvec(a: Tensor, x: Tensor) -> Tensor:
    _check_same_dtype("matvec", a, x)
    if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ShapeError("matvec", a.shape, x.shape)
    ad, xd = a.data, x.data

    def backward(g):
        return (np.outer(g, xd), ad.T @ g)

    return _make(ad @ xd, (a, x), backward, "matvec")


def dot(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("dot", a, b)
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("dot", a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        return (g * bd, g * ad)

    return _make(ad @ bd, (a, b), backward, "dot")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="2-D only")

    def backward(g):
        return (g.T,)

    return _make(a.data.T.copy(), (a,), backward, "transpose")


# -- reductions --------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(a.data.dtype, copy=True),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, shape).astype(a.data.dtype, copy=True),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), backward, "sum")


def tmean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    count = a.data.size if axis is None else shape[axis]

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g / count, shape).astype(a.data.dtype, copy=True),)
        ge = np.expand_dims(g, axis) / count
        return (np.broadcast_to(ge, shape).astype(a.data.dtype, copy=True),)

    return _make(a.data.mean(axis=axis), (a,), backward, "mean")


def max_last(a: Tensor) -> Tensor:
    """Maximum over the last axis; ties route the gradient to the first index."""
    ad = a.data
    idx = np.argmax(ad, axis=-1)
    out = np.take_along_axis(ad, np.expand_dims(idx, -1), axis=-1).squeeze(-1)

    def backward(g):
        ga = np.zeros_like(ad)
        np.put_along_axis(ga, np.expand_dims(idx, -1), np.expand_dims(np.asarray(g), -1), axis=-1)
        return (ga,)

    return _make(out, (a,), backward, "max_last")


def softmax_last(a: Tensor) -> Tensor:
    """Softmax over the last axis, computed with max-subtraction."""
    ad = a.data
    if not np.all(np.isfinite(ad)):
        raise DomainError(f"softmax: non-finite input at flat index {_first_nonfinite(ad)}")
    shifted = ad - ad.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        inner = (g * out).sum(axis=-1, keepdims=True)
        return ((g - inner) * out,)

    return _make(out, (a,), backward, "softmax")


def logsumexp_last(a: Tensor) -> Tensor:
    """log(sum(exp(x))) over the last axis, stable under large logits."""
    ad = a.data
    if not np.all(np.isfinite(ad)):
        raise DomainError(f"logsumexp: non-finite input at flat index {_first_nonfinite(ad)}")
    m = ad.max(axis=-1, keepdims=True)
    e = np.exp(ad - m)
    s = e.sum(axis=-1, keepdims=True)
    out = (m + np.log(s)).squeeze(-1)
    soft = e / s

    def backward(g):
        return (np.expand_dims(np.asarray(g), -1) * soft,)

    return _make(out, (a,), backward, "logsumexp")


# -- structure ops -----------------------------------------------------------


def concat(parts, axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat", (), detail="empty input list")
    for p in parts[1:]:
        _check_same_dtype("concat", parts[0], p)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(parts)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError("narrow", a.shape, detail=f"axis {axis} slice [{start}:{start + length}]")
    slicer = [slice(None)] * a.data.ndim
    slicer[axis] = slice(start, start + length)
    slicer = tuple(slicer)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[slicer] = g
        return (ga,)

    return _make(a.data[slicer].copy(), (a,), backward, "narrow")


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _make(a.data.reshape(shape).copy(), (a,), backward, "reshape")


def gather_flat(a: Tensor, indices) -> Tensor:
    """1-D gather from the row-major flattening of `a`."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    flat = a.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise ShapeError("gather", a.shape, detail=f"index out of range for size {flat.size}")

    def backward(g):
        ga = np.zeros_like(flat)
        np.add.at(ga, idx, g)
        return (ga.reshape(a.shape),)

    return _make(flat[idx].copy(), (a,), backward, "gather")


# -- explicit promotion ops ---------------------------------------------------


def add_rowvec(x: Tensor, v: Tensor) -> Tensor:
    """x[i, j] + v[j]: add one vector to every row (bias addition)."""
    _check_same_dtype("add_rowvec", x, v)
    if x.data.ndim != 2 or v.data.ndim != 1 or x.shape[1] != v.shape[0]:
        raise ShapeError("add_rowvec", x.shape, v.shape)

    def backward(g):
        return (g, g.sum(axis=0))

    return _make(x.data + v.data[None, :], (x, v), backward, "add_rowvec")


def add_colvec(x: Tensor, u: Tensor) -> Tensor:
    """x[i, j] + u[i]: add one scalar per row across its columns."""
    _check_same_dtype("add_colvec", x, u)
    if x.data.ndim != 2 or u.data.ndim != 1 or x.shape[0] != u.shape[0]:
        raise ShapeError("add_colvec", x.shape, u.shape)

    def backward(g):
        return (g, g.sum(axis=1))

    return _make(x.data + u.data[:, None], (x, u), backward, "add_colvec")


def scale_colvec(x: Tensor, u: Tensor) -> Tensor:
    """x[i, j] * u[i]: scale each row by its own factor."""
    _check_same_dtype("scale_colvec", x, u)
    if x.data.ndim != 2 or u.data.ndim != 1 or x.shape[0] != u.shape[0]:
        raise ShapeError("scale_colvec", x.shape, u.shape)
    xd, ud = x.data, u.data

    def backward(g):
        return (g * ud[:, None], (g * xd).sum(axis=1))

    return _make(xd * ud[:, None], (x, u), backward, "scale_colvec")


# -- gradient barrier ---------------------------------------------------------


def stop_gradient(a: Tensor) -> Tensor:
    """Forward identity that contributes zero to all upstream gradients."""
    out = Tensor.__new__(Tensor)
    out.data = a.data
    out.requires_grad = False
    out.grad = None
    out.op = "stop_gradient"
    out._parents = ()
    out._backward = None
    out._rg = False
    return out


def straight_through(soft: Tensor, hard_data: np.ndarray) -> Tensor:
    """soft + sg(hard - soft) with the forward value bit-exactly `hard_data`.

    Composing add/sub would round the forward value; this op guarantees the
    hard value forward while the backward is the identity onto the soft path.
    """
    hard = np.asarray(hard_data, dtype=soft.data.dtype)
    if hard.shape != soft.shape:
        raise ShapeError("straight_through", soft.shape, hard.shape)

    def backward(g):
        return (g,)

    return _make(hard, (soft,), backward, "straight_through")


# -- composites ---------------------------------------------------------------


def l2_normalize(x: Tensor) -> Tensor:
    """Scale a vector (or each row of a matrix) to unit L2 norm."""
    if x.data.ndim == 1:
        sq = tsum(mul(x, x))
        if sq.item() == 0.0:
            raise DomainError("l2_normalize: zero-norm vector")
        return mul(x, power(sq, -0.5))
    if x.data.ndim == 2:
        sq = tsum(mul(x, x), axis=1)
        if np.any(sq.data == 0.0):
            idx = int(np.argmax(sq.data == 0.0))
            raise DomainError(f"l2_normalize: zero-norm row {idx}")
        return scale_colvec(x, power(sq, -0.5))
    raise ShapeError("l2_normalize", x.shape, detail="1-D or 2-D only")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine of the angle between two nonzero vectors."""
    if a.data.ndim != 1 or a.shape != b.shape:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    na = tsum(mul(a, a))
    nb = tsum(mul(b, b))
    if na.item() == 0.0 or nb.item() == 0.0:
        raise DomainError("cosine_similarity: zero-norm operand")
    return mul(dot(a, b), power(mul(na, nb), -0.5))


def cosine_rows(a: Tensor, b: Tensor) -> Tensor:
    """Matrix of cosines between every row of `a` and every row of `b`."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError("cosine_rows", a.shape, b.shape)
    return matmul(l2_normalize(a), transpose(l2_normalize(b)))


def conv1d_same(x: Tensor, w0: Tensor, w1: Tensor, w2: Tensor, bias: Tensor) -> Tensor:
    """Kernel-3 1-D convolution over rows with zero same-padding.

    `x` is (L, C_in); each tap weight is (C_in, C_out).  Output length equals
    input length for every L >= 1.
    """
    L = x.shape[0]
    zero = Tensor(np.zeros((1, x.shape[1]), dtype=x.data.dtype))
    xp = concat([zero, x, zero], axis=0)
    out = matmul(narrow(xp, 0, 0, L), w0)
    out = add(out, matmul(narrow(xp, 0, 1, L), w1))
    out = add(out, matmul(narrow(xp, 0, 2, L), w2))
    return add_rowvec(out, bias)


# -- backward pass ------------------------------------------------------------


def topo_order(loss: Tensor) -> list:
    """Topological order of the gradient-requiring subgraph ending at `loss`."""
    topo = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._rg and id(p) not in visited:
                stack.append((p, False))
    return topo


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf."""
    if loss.shape != ():
        raise ShapeError("backward", loss.shape, detail="loss must be scalar")
    if not loss._rg:
        return
    order = topo_order(loss)
    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        grads = node._backward(node.grad)
        for parent, g in zip(node._parents, grads):
            if not parent._rg or g is None:
                continue
            parent.grad = g if parent.grad is None else parent.grad + g
        if node._parents and node is not loss:
            node.grad = None  # free intermediate buffers; leaves keep theirs


def gradient(t: Tensor) -> np.ndarray:
    """Gradient of a leaf after `backward`; zero if the loss never touched it."""
    if t.grad is None:
        return np.zeros_like(t.data)
    return np.asarray(t.grad).reshape(t.shape) if t.shape != () else np.asarray(t.grad)


def _first_nonfinite(arr: np.ndarray) -> int:
    return int(np.argmax(~np.isfinite(arr.reshape(-1))))


# -- finite-difference verification --------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    tol: float
    h: float
    n_coords: int
    passed: bool
    worst: str = ""


def grad_check(build, inputs, h: float = 1e-4, tol: float = 1e-4, max_coords_per_input: int | None = None, rng=None) -> GradCheckReport:
    """Compare analytic gradients of `build(*inputs)` against central differences.

    `build` must be a deterministic function returning a scalar Tensor; it is
    re-invoked for every perturbed evaluation, so any randomness inside must be
    frozen by the caller.  Inputs must be float64 leaves with requires_grad.
    """
    inputs = list(inputs)
    for x in inputs:
        if x.data.dtype != np.float64:
            raise DomainError("grad_check requires float64 inputs")
        x.zero_grad()
    loss = build(*inputs)
    if loss.shape != ():
        raise ShapeError("grad_check", loss.shape, detail="build must return a scalar")
    backward(loss)
    analytic = [gradient(x).copy() for x in inputs]

    max_rel = 0.0
    max_abs = 0.0
    n_coords = 0
    worst = ""
    for xi, (x, a) in enumerate(zip(inputs, analytic)):
        flat = x.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords_per_input is not None and flat.size > max_coords_per_input:
            gen = rng if rng is not None else np.random.default_rng(0)
            coords = gen.choice(flat.size, size=max_coords_per_input, replace=False)
        for c in coords:
            orig = flat[c]
            with no_grad():
                flat[c] = orig + h
                f_plus = build(*inputs).item()
                flat[c] = orig - h
                f_minus = build(*inputs).item()
            flat[c] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise DomainError(f"grad_check: non-finite evaluation at input {xi} flat index {c}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            ana = a.reshape(-1)[c]
            abs_err = abs(ana - numeric)
            rel_err = abs_err / max(abs(ana), abs(numeric), 1e-6)
            n_coords += 1
            if abs_err > max_abs:
                max_abs = abs_err
            if rel_err > max_rel:
                max_rel = rel_err
                worst = f"input {xi} coord {c}: analytic {ana:.6g} numeric {numeric:.6g}"
    return GradCheckReport(max_rel_error=max_rel, max_abs_error=max_abs, tol=tol, h=h, n_coords=n_coords, passed=max_rel <= tol, worst=worst)
