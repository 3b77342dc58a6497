"""Define-by-run reverse-mode differentiation on float64 numpy arrays.

Every primitive computes its value eagerly and, when a :class:`Tape` is
active and at least one input requires a gradient, appends a record
``(input refs, vjp)`` to that tape.  :func:`backward` replays the records
in reverse order.  Non-leaf inputs are referenced by their record index,
so a finished tape holds no reference cycles.

Derivative formulas needed by the flow (activation slopes, Jacobian
columns) are themselves taped operations, either composed from the basic
primitives or fused with a hand-written pullback, so gradients of
log-determinants come out of the same machinery without any
higher-order support in the engine.
"""

from __future__ import annotations

import threading

import numpy as np
from scipy.special import expit

__all__ = [
    "ShapeError",
    "Tensor",
    "Parameter",
    "Tape",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scalar_mul",
    "add_scalar",
    "matmul",
    "transpose",
    "permute",
    "linear",
    "residual_logabsdet",
    "weighted_concat",
    "multi_linear",
    "primitive",
    "concat_features",
    "split_features",
    "stack",
    "sum",
    "mean",
    "log",
    "exp",
    "sqrt",
    "sigmoid",
    "softplus",
    "relu",
    "logabsdet",
    "backward",
    "gradients",
    "vjp",
    "vjp_fn",
    "numerical_grad",
    "rel_err",
]


class ShapeError(ValueError):
    """Raised when primitive operands have incompatible shapes."""

    def __init__(self, op, a_shape, b_shape):
        super().__init__(f"{op}: incompatible shapes {tuple(a_shape)} and {tuple(b_shape)}")
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "tapes", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; primitives evaluated inside the block are
    recorded on the innermost active tape.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        if not hasattr(_state, "tapes"):
            _state.tapes = []
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    def __len__(self):
        return len(self.records)


class Tensor:
    """A float64 array with an optional place on a tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "tape", "node", "is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name
        self.tape = None
        self.node = -1
        self.is_leaf = True

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
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, 1.0 / other)
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor whose gradient is accumulated by :func:`backward`."""

    __slots__ = ()

    def __init__(self, data, name=""):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def primitive(value, inputs, vjp):
    """Wrap ``value`` as the output of a primitive and record ``vjp`` if taping.

    ``vjp(g)`` must return one cotangent (or ``None``) per input and must not
    capture Tensor objects.
    """
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t.requires_grad:
                # Non-leaf inputs are referenced by node index only, which
                # keeps tapes free of reference cycles.
                refs = tuple(
                    (t.node if t.tape is tape else -1) if not t.is_leaf else t for t in inputs
                )
                out.requires_grad = True
                out.is_leaf = False
                out.tape = tape
                out.node = len(tape.records)
                tape.records.append((refs, vjp))
                break
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return primitive(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return primitive(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return primitive(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return primitive(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a):
    a = as_tensor(a)
    return primitive(-a.data, (a,), lambda g: (-g,))


def scalar_mul(a, c):
    """Multiply by a Python constant; ``c`` receives no gradient."""
    a = as_tensor(a)
    c = float(c)
    return primitive(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a, c):
    a = as_tensor(a)
    return primitive(a.data + float(c), (a,), lambda g: (g,))


def matmul(a, b):
    """Matrix product of 2-D operands (batched when the left operand is 3-D)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T
        if ad.ndim == 2:
            gb = ad.T @ g
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return primitive(ad @ bd, (a, b), vjp)


def permute(a, axes):
    a = as_tensor(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return primitive(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, (2,))
    return primitive(a.data.T, (a,), lambda g: (g.T,))


def concat_features(tensors):
    """Concatenate along the last (feature) axis."""
    tensors = [as_tensor(t) for t in tensors]
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError("concat_features", tensors[0].shape, t.shape)
    sizes = [t.shape[-1] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return primitive(
        np.concatenate([t.data for t in tensors], axis=-1),
        tuple(tensors),
        lambda g: tuple(np.split(g, cuts, axis=-1)),
    )


def split_features(a, sizes):
    """Split the last axis into consecutive pieces of the given sizes."""
    a = as_tensor(a)
    if builtins_sum(sizes) != a.shape[-1]:
        raise ShapeError("split_features", a.shape, (builtins_sum(sizes),))
    pieces = []
    start = 0
    for s in sizes:
        pieces.append(_slice_features(a, start, start + s))
        start += s
    return pieces


def _slice_features(a, start, stop):
    full = a.shape

    def vjp(g):
        out = np.zeros(full)
        out[..., start:stop] = g
        return (out,)

    return primitive(a.data[..., start:stop], (a,), vjp)


def stack(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    for t in tensors[1:]:
        if t.shape != tensors[0].shape:
            raise ShapeError("stack", tensors[0].shape, t.shape)
    n = len(tensors)
    ax = axis if axis >= 0 else tensors[0].ndim + 1 + axis
    return primitive(
        np.stack([t.data for t in tensors], axis=ax),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=ax) for i in range(n)),
    )


builtins_sum = sum


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    shape = a.shape
    if axis is None:
        return primitive(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    return primitive(
        a.data.sum(axis=axis),
        (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),),
    )


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scalar_mul(sum(a, axis), 1.0 / n)


def log(a):
    a = as_tensor(a)
    ad = a.data
    return primitive(np.log(ad), (a,), lambda g: (g / ad,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return primitive(out, (a,), lambda g: (g * out,))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return primitive(out, (a,), lambda g: (0.5 * g / out,))


def sigmoid(a):
    a = as_tensor(a)
    s = expit(a.data)
    return primitive(s, (a,), lambda g: (g * s * (1.0 - s),))


def softplus(a):
    a = as_tensor(a)
    ad = a.data
    return primitive(np.logaddexp(0.0, ad), (a,), lambda g: (g * expit(ad),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return primitive(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def logabsdet(m):
    """``ln|det|`` over the trailing two axes of a (batch of) square matrices."""
    m = as_tensor(m)
    if m.ndim < 2 or m.shape[-1] != m.shape[-2]:
        raise ShapeError("logabsdet", m.shape, m.shape[-1:] * 2)
    md = m.data
    _, val = np.linalg.slogdet(md)

    def vjp(g):
        inv_t = np.swapaxes(np.linalg.inv(md), -1, -2)
        return (np.asarray(g)[..., None, None] * inv_t,)

    return primitive(val, (m,), vjp)


def linear(x, w, b=None, scale=1.0):
    """Fused affine map ``scale * x @ w.T + b`` over the last axis of ``x``.

    ``scale`` is a constant (it receives no gradient).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError("linear", x.shape, w.shape)
    xd, wd = x.data, w.data
    wt = wd.T * scale if scale != 1.0 else wd.T
    out = xd @ wt
    has_bias = b is not None
    if has_bias:
        b = as_tensor(b)
        out += b.data

    # closures capture arrays only: a Tensor here would tie the tape into a cycle
    def vjp(g):
        gx = g @ wt.T
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1])
        if scale != 1.0:
            gw *= scale
        if not has_bias:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return primitive(out, inputs, vjp)


def multi_linear(pieces, coeffs, w, b=None, scale=1.0):
    """Fused ``scale * concat([c_k * piece_k]) @ w.T + b`` without building the concatenation.

    ``pieces`` share all axes but the last; ``coeffs`` are scalars (floats or
    size-1 tensors), one per piece.
    """
    pieces = [as_tensor(p) for p in pieces]
    coeffs = [as_tensor(c) for c in coeffs]
    w = as_tensor(w)
    widths = [p.shape[-1] for p in pieces]
    if len(coeffs) != len(pieces) or w.ndim != 2 or w.shape[1] != builtins_sum(widths):
        raise ShapeError("multi_linear", tuple(widths), w.shape)
    if any(c.size != 1 for c in coeffs):
        raise ShapeError("multi_linear", tuple(c.shape for c in coeffs), (1,))
    wd = w.data
    offsets = np.concatenate([[0], np.cumsum(widths)])
    cs = [float(c.data.reshape(())) for c in coeffs]
    cshapes = [c.shape for c in coeffs]
    pds = [p.data for p in pieces]
    # partial products piece_k @ W_k^T * scale, kept for the coefficient gradients
    wts = [wd[:, offsets[k] : offsets[k + 1]].T * scale for k in range(len(pieces))]
    parts = [pd @ wt for pd, wt in zip(pds, wts)]
    out = parts[0] * cs[0]
    for part, c in zip(parts[1:], cs[1:]):
        out += part * c
    has_bias = b is not None
    if has_bias:
        b = as_tensor(b)
        out += b.data

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gw = np.empty_like(wd)
        grads = []
        for k, (pd, wt, part, c) in enumerate(zip(pds, wts, parts, cs)):
            grads.append((g @ wt.T) * c)
            gw[:, offsets[k] : offsets[k + 1]] = (g2.T @ pd.reshape(-1, pd.shape[-1])) * (c * scale)
        grads.extend(np.full(sh, np.vdot(g, part)) for sh, part in zip(cshapes, parts))
        grads.append(gw)
        if has_bias:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (*pieces, *coeffs, w) if not has_bias else (*pieces, *coeffs, w, b)
    return primitive(out, inputs, vjp)


def weighted_concat(a, b, wa, wb):
    """Fused ``concat_features([a * wa, b * wb])`` for scalar weights ``wa``, ``wb``."""
    a, b, wa, wb = as_tensor(a), as_tensor(b), as_tensor(wa), as_tensor(wb)
    if a.shape[:-1] != b.shape[:-1] or wa.size != 1 or wb.size != 1:
        raise ShapeError("weighted_concat", a.shape, b.shape)
    ad, bd = a.data, b.data
    na = ad.shape[-1]
    ca, cb = float(wa.data.reshape(())), float(wb.data.reshape(()))
    sa, sb = wa.shape, wb.shape
    out = np.empty(ad.shape[:-1] + (na + bd.shape[-1],))
    np.multiply(ad, ca, out=out[..., :na])
    np.multiply(bd, cb, out=out[..., na:])

    def vjp(g):
        ga, gb = g[..., :na], g[..., na:]
        gwa = np.full(sa, np.vdot(ga, ad))
        gwb = np.full(sb, np.vdot(gb, bd))
        return ga * ca, gb * cb, gwa, gwb

    return primitive(out, (a, b, wa, wb), vjp)


def residual_logabsdet(t):
    """``ln|det(I + J)|`` per batch row, where ``t[j, b, i] = J[b, i, j]``.

    ``t`` holds the ``d`` Jacobian columns as stacked tangents of shape
    ``(d, B, d)``.
    """
    t = as_tensor(t)
    if t.ndim != 3 or t.shape[0] != t.shape[2]:
        raise ShapeError("residual_logabsdet", t.shape, (t.shape[-1], t.shape[1], t.shape[-1]))
    d = t.shape[0]
    m = np.transpose(t.data, (1, 2, 0)) + np.eye(d)
    _, val = np.linalg.slogdet(m)

    def vjp(g):
        # d/dM = inv(M)^T, then map M[b, i, j] back to t[j, b, i]
        inv = np.linalg.inv(m)
        return (np.transpose(inv, (1, 0, 2)) * np.asarray(g)[None, :, None],)

    return primitive(val, (t,), vjp)


# ---------------------------------------------------------------------------
# reverse sweep
# ---------------------------------------------------------------------------


def _replay(tape, out, cotangent):
    """Reverse sweep from ``out``; returns ``{id(leaf): (leaf, grad)}``."""
    records = tape.records
    node_grads = [None] * (out.node + 1)
    node_grads[out.node] = cotangent
    leaves = {}
    for idx in range(out.node, -1, -1):
        g = node_grads[idx]
        if g is None:
            continue
        node_grads[idx] = None
        refs, rule = records[idx]
        for ref, ig in zip(refs, rule(g)):
            if ig is None:
                continue
            if type(ref) is int:
                if ref < 0:
                    continue
                prev = node_grads[ref]
                node_grads[ref] = ig if prev is None else prev + ig
            elif ref.requires_grad:
                key = id(ref)
                prev = leaves.get(key)
                leaves[key] = (ref, ig) if prev is None else (ref, prev[1] + ig)
    return leaves


def backward(loss, cotangent=None):
    """Accumulate ``d loss / d leaf`` into ``.grad`` of every reachable leaf.

    ``loss`` must be a scalar unless an explicit ``cotangent`` is given.
    """
    if cotangent is None:
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        cotangent = np.ones(loss.shape)
    elif np.shape(cotangent) != loss.shape:
        raise ShapeError("backward", loss.shape, np.shape(cotangent))
    if loss.tape is None:
        raise ValueError("loss was not produced on a tape")
    leaves = _replay(loss.tape, loss, np.asarray(cotangent, dtype=np.float64))
    for leaf, g in leaves.values():
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64)
        else:
            leaf.grad += g


def gradients(output, wrt, cotangent=None):
    """Return cotangent-weighted gradients of ``output`` for each tensor in ``wrt``.

    Unlike :func:`backward` nothing is written into ``.grad``.
    """
    if cotangent is None:
        cotangent = np.ones(output.shape)
    if output.tape is None:
        return [np.zeros(t.shape) for t in wrt]
    leaves = _replay(output.tape, output, np.asarray(cotangent, dtype=np.float64))
    out = []
    for t in wrt:
        hit = leaves.get(id(t))
        out.append(np.zeros(t.shape) if hit is None else np.array(hit[1], dtype=np.float64))
    return out


def vjp_fn(f, x):
    """Evaluate ``f(x)`` once and return ``(y, pullback)``.

    ``pullback(v)`` gives ``v^T J_f(x)`` and may be called repeatedly;
    each call replays the recorded tape.
    """
    xv = Tensor(np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
    with Tape():
        y = f(xv)
    y_shape = y.shape

    def pullback(v):
        v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        if v.shape != y_shape:
            raise ShapeError("vjp", y_shape, v.shape)
        if y.tape is None:
            return np.zeros(xv.shape)
        return gradients(y, [xv], v)[0]

    return y, pullback


def vjp(f, x, v):
    """``v^T J_f(x)``."""
    return vjp_fn(f, x)[1](v)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def numerical_grad(fn, x, h=1e-5):
    """Central-difference gradient of scalar ``fn`` with respect to array ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + h
        fp = fn()
        x[i] = orig - h
        fm = fn()
        x[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    """Elementwise ``|a-b| / max(1, |a|, |b|)``, reduced by max."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))))
