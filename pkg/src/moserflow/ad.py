"""Vectorized automatic differentiation on top of numpy.

Two number types live here:

* :class:`Tensor` records a tape for reverse accumulation.  Only trainable
  parameters are ever created as tensors; everything derived from them is a
  tensor too, and ``backward`` fills ``.grad`` on the leaves.
* :class:`Dual` carries a primal and a tangent (forward mode).  Each dual is
  tagged with the perturbation it belongs to, so duals nest without
  perturbation confusion: a dual of duals gives second derivatives, a dual of
  tensors gives reverse-over-forward gradients.

The module-level functions (``exp``, ``softplus``, ``sum`` ...) dispatch on
the argument type, so model code is written once and runs on plain arrays,
duals, tensors, or any nesting of those.
"""

import itertools

import numpy as np

_tag_counter = itertools.count(1)


def new_tag():
    """Return a fresh perturbation tag, larger than every tag issued before."""
    return next(_tag_counter)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _raw(x):
    # python scalars stay weakly typed so float32 graphs are not promoted
    if isinstance(x, Tensor):
        return x.value
    if isinstance(x, (int, float)):
        return x
    return np.asarray(x)


def _stable_sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class Tensor:
    """Array node on a reverse-mode tape."""

    __array_ufunc__ = None

    def __init__(self, value, edges=()):
        self.value = np.asarray(value)
        self.edges = edges
        self.grad = None

    @classmethod
    def leaf(cls, value):
        return cls(np.array(value, copy=True))

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def dtype(self):
        return self.value.dtype

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.value)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent, _ in node.edges:
                if id(parent) not in seen:
                    stack.append((parent, False))
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.edges:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, vjp in node.edges:
                pg = vjp(g)
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        ov = _raw(other)
        out = self.value + ov
        edges = [(self, lambda g, s=self.shape: _unbroadcast(g, s))]
        if isinstance(other, Tensor):
            edges.append((other, lambda g, s=other.shape: _unbroadcast(g, s)))
        return Tensor(out, tuple(edges))

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        ov = _raw(other)
        sv = self.value
        edges = [(self, lambda g, s=self.shape: _unbroadcast(g * ov, s))]
        if isinstance(other, Tensor):
            edges.append((other, lambda g, s=other.shape: _unbroadcast(g * sv, s)))
        return Tensor(sv * ov, tuple(edges))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        ov = _raw(other)
        out = self.value / ov
        edges = [(self, lambda g, s=self.shape: _unbroadcast(g / ov, s))]
        if isinstance(other, Tensor):
            edges.append(
                (other, lambda g, s=other.shape: _unbroadcast(-g * out / ov, s))
            )
        return Tensor(out, tuple(edges))

    def __rtruediv__(self, other):
        ov = _raw(other)
        out = ov / self.value
        return Tensor(
            out, ((self, lambda g, s=self.shape: _unbroadcast(-g * out / self.value, s)),)
        )

    def __pow__(self, p):
        if not np.isscalar(p):
            return NotImplemented
        sv = self.value
        return Tensor(sv ** p, ((self, lambda g: g * p * sv ** (p - 1)),))

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _matmul(self, other)

    def __rmatmul__(self, other):
        return _matmul(other, self)

    def __getitem__(self, idx):
        shape, dtype = self.shape, self.dtype

        def vjp(g):
            full = np.zeros(shape, dtype=dtype)
            np.add.at(full, idx, g)
            return full

        return Tensor(self.value[idx], ((self, vjp),))

    # primitives used by the dispatchers ------------------------------------

    def _unary(self, out, local):
        return Tensor(out, ((self, lambda g: g * local()),))

    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, shape).copy()

        return Tensor(self.value.sum(axis=axis, keepdims=keepdims), ((self, vjp),))

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        old = self.shape
        return Tensor(self.value.reshape(shape), ((self, lambda g: g.reshape(old)),))


def _matmul(a, b):
    av = _raw(a)
    bv = _raw(b)
    if bv.ndim != 2:
        raise ValueError("right operand of matmul must be a matrix")
    edges = []
    if isinstance(a, Tensor):
        edges.append((a, lambda g: g @ bv.T))
    if isinstance(b, Tensor):
        edges.append(
            (b, lambda g: av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1]))
        )
    return Tensor(av @ bv, tuple(edges))


class Dual:
    """Forward-mode number ``v + d·ε`` for the perturbation ``tag``.

    ``d`` carries a leading lane axis: its shape is ``(L,) + shape(v)``, one
    lane per tangent direction, so several directional derivatives share a
    single primal evaluation.  ``v`` and ``d`` may themselves be arrays,
    tensors or duals of lower tag.
    """

    __array_ufunc__ = None
    __slots__ = ("v", "d", "tag")

    def __init__(self, v, d, tag):
        self.v = v
        self.d = d
        self.tag = tag

    @property
    def shape(self):
        return np.shape(value(self.v))

    @property
    def ndim(self):
        return len(self.shape)

    @property
    def lanes(self):
        return np.shape(value(self.d))[0]

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return f"Dual(tag={self.tag}, shape={self.shape}, lanes={self.lanes})"

    def __add__(self, other):
        return _dual_add(self, other)

    def __radd__(self, other):
        return _dual_add(other, self)

    def __sub__(self, other):
        return _dual_add(self, -other)

    def __rsub__(self, other):
        return _dual_add(other, -self)

    def __neg__(self):
        return Dual(-self.v, -self.d, self.tag)

    def __mul__(self, other):
        return _dual_mul(self, other)

    def __rmul__(self, other):
        return _dual_mul(other, self)

    def __truediv__(self, other):
        return _dual_div(self, other)

    def __rtruediv__(self, other):
        return _dual_div(other, self)

    def __pow__(self, p):
        if not np.isscalar(p):
            return NotImplemented
        return Dual(self.v ** p, p * self.v ** (p - 1) * self.d, self.tag)

    def __matmul__(self, other):
        return _dual_matmul(self, other)

    def __rmatmul__(self, other):
        return _dual_matmul(other, self)

    def __getitem__(self, idx):
        if not isinstance(idx, tuple):
            idx = (idx,)
        didx = idx if idx and idx[0] is Ellipsis else (slice(None),) + idx
        return Dual(self.v[idx], self.d[didx], self.tag)


def _tag_of(a):
    return a.tag if isinstance(a, Dual) else 0


def _split(a, b):
    t = max(_tag_of(a), _tag_of(b))
    av, ad = (a.v, a.d) if _tag_of(a) == t else (a, None)
    bv, bd = (b.v, b.d) if _tag_of(b) == t else (b, None)
    return t, av, ad, bv, bd


def _align(d, ndim):
    # unit axes after the lane axis so d broadcasts against a rank-ndim primal
    shape = np.shape(value(d))
    extra = ndim - (len(shape) - 1)
    if extra <= 0:
        return d
    return reshape(d, shape[:1] + (1,) * extra + shape[1:])


def _fit(d, shape):
    # tangent of the non-constant operand must grow with the broadcast result
    d = _align(d, len(shape))
    if np.shape(value(d))[1:] == shape:
        return d
    return d + np.zeros((1,) + shape, dtype=value(d).dtype)


def _binary(a, b, v):
    t, av, ad, bv, bd = _split(a, b)
    n = len(np.shape(value(v)))
    ad = None if ad is None else _align(ad, n)
    bd = None if bd is None else _align(bd, n)
    return t, av, ad, bv, bd


def _dual_add(a, b):
    t, av, _, bv, _ = _split(a, b)
    v = av + bv
    _, _, ad, _, bd = _binary(a, b, v)
    shape = np.shape(value(v))
    if ad is None:
        d = _fit(bd, shape)
    elif bd is None:
        d = _fit(ad, shape)
    else:
        d = _fit(ad + bd, shape)
    return Dual(v, d, t)


def _dual_mul(a, b):
    t, av, _, bv, _ = _split(a, b)
    v = av * bv
    _, _, ad, _, bd = _binary(a, b, v)
    if ad is None:
        d = av * bd
    elif bd is None:
        d = ad * bv
    else:
        d = ad * bv + av * bd
    return Dual(v, d, t)


def _dual_div(a, b):
    t, av, _, bv, _ = _split(a, b)
    v = av / bv
    _, _, ad, _, bd = _binary(a, b, v)
    if bd is None:
        d = ad / bv
    elif ad is None:
        d = -(v * bd) / bv
    else:
        d = (ad - v * bd) / bv
    return Dual(v, d, t)


def _dual_matmul(a, b):
    t, av, ad, bv, bd = _split(a, b)
    if ad is None:
        d = av @ bd
    elif bd is None:
        d = ad @ bv
    else:
        d = ad @ bv + av @ bd
    return Dual(av @ bv, d, t)


def _lane_axis(axis, ndim):
    """Translate a primal axis to the matching tangent axis (always negative)."""
    if axis is None:
        return tuple(range(-ndim, 0))
    if isinstance(axis, tuple):
        return tuple(_lane_axis(a, ndim) for a in axis)
    return axis - ndim if axis >= 0 else axis


# ---------------------------------------------------------------------------
# unwrapping


def value(x):
    """Innermost numeric value of ``x`` as an ndarray (no derivative info)."""
    while isinstance(x, Dual):
        x = x.v
    if isinstance(x, Tensor):
        return x.value
    return np.asarray(x)


def tangent(y, tag):
    """Tangent of ``y`` with respect to perturbation ``tag``, lanes first.

    Nested perturbations must be extracted newest first; a constant ``y``
    gives zeros with a single broadcastable lane.
    """
    if isinstance(y, Dual):
        if y.tag == tag:
            return y.d
        if y.tag > tag:
            raise ValueError("extract the newer perturbation before an older one")
    return np.zeros((1,) + np.shape(value(y)), dtype=value(y).dtype)


def primal(y, tag):
    """Strip perturbation ``tag`` from ``y``, keeping all other structure."""
    if isinstance(y, Dual):
        if y.tag == tag:
            return y.v
        if y.tag > tag:
            return Dual(primal(y.v, tag), primal(y.d, tag), y.tag)
    return y


# ---------------------------------------------------------------------------
# dispatched elementary functions


def exp(x):
    if isinstance(x, Dual):
        y = exp(x.v)
        return Dual(y, y * x.d, x.tag)
    if isinstance(x, Tensor):
        out = np.exp(x.value)
        return x._unary(out, lambda: out)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.v), x.d / x.v, x.tag)
    if isinstance(x, Tensor):
        return x._unary(np.log(x.value), lambda: 1.0 / x.value)
    return np.log(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.v), cos(x.v) * x.d, x.tag)
    if isinstance(x, Tensor):
        return x._unary(np.sin(x.value), lambda: np.cos(x.value))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.v), -(sin(x.v) * x.d), x.tag)
    if isinstance(x, Tensor):
        return x._unary(np.cos(x.value), lambda: -np.sin(x.value))
    return np.cos(x)


def sqrt(x):
    if isinstance(x, Dual):
        y = sqrt(x.v)
        return Dual(y, x.d * 0.5 / y, x.tag)
    if isinstance(x, Tensor):
        out = np.sqrt(x.value)
        return x._unary(out, lambda: 0.5 / out)
    return np.sqrt(x)


def _softplus_parts(z, beta):
    # Clamping the exponent at -50 keeps exp out of the denormal range, which
    # is slow in hardware; the change in softplus is below 2e-22 / beta.
    bz = beta * z
    e = np.abs(bz)
    np.negative(e, out=e)
    np.maximum(e, -50.0, out=e)
    np.exp(e, out=e)
    np.log1p(e, out=e)
    s = np.multiply(bz, 0.5)
    np.tanh(s, out=s)
    s += 1.0
    s *= 0.5
    np.maximum(bz, 0.0, out=bz)
    bz += e
    bz /= beta
    return bz, s


def _sigmoid_tensor(x, s, beta):
    return x._unary(s, lambda: beta * s * (1.0 - s))


def softplus_and_slope(x, beta=1.0):
    """``(softplus(x, beta), sigmoid(x, beta))`` sharing the work between them."""
    if isinstance(x, Dual):
        sp, s = softplus_and_slope(x.v, beta)
        return (Dual(sp, s * x.d, x.tag),
                Dual(s, beta * s * (1.0 - s) * x.d, x.tag))
    if isinstance(x, Tensor):
        sp, s = _softplus_parts(x.value, beta)
        return x._unary(sp, lambda: s), _sigmoid_tensor(x, s, beta)
    return _softplus_parts(np.asarray(x), beta)


def sigmoid(x, beta=1.0):
    """``1 / (1 + exp(-beta x))``."""
    if isinstance(x, Dual):
        s = sigmoid(x.v, beta)
        return Dual(s, beta * s * (1.0 - s) * x.d, x.tag)
    if isinstance(x, Tensor):
        return _sigmoid_tensor(x, _stable_sigmoid(beta * x.value), beta)
    return _stable_sigmoid(beta * np.asarray(x))


def softplus(x, beta=1.0):
    """``log(1 + exp(beta x)) / beta``, computed without overflow."""
    if isinstance(x, Dual):
        sp, s = softplus_and_slope(x.v, beta)
        return Dual(sp, s * x.d, x.tag)
    if isinstance(x, Tensor):
        sp, s = _softplus_parts(x.value, beta)
        return x._unary(sp, lambda: s)
    return _softplus_parts(np.asarray(x), beta)[0]


def clamp_min(x, c):
    """``max(c, x)``; the derivative is 0 at ``x == c`` (flat side)."""
    if isinstance(x, Dual):
        mask = value(x) > c
        return Dual(clamp_min(x.v, c), x.d * mask, x.tag)
    if isinstance(x, Tensor):
        mask = x.value > c
        return x._unary(np.maximum(x.value, c), lambda: mask)
    return np.maximum(x, c)


def clamp_max(x, c):
    """``min(c, x)``; the derivative is 0 at ``x == c``."""
    if isinstance(x, Dual):
        mask = value(x) < c
        return Dual(clamp_max(x.v, c), x.d * mask, x.tag)
    if isinstance(x, Tensor):
        mask = x.value < c
        return x._unary(np.minimum(x.value, c), lambda: mask)
    return np.minimum(x, c)


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    if isinstance(x, Dual):
        lane_axis = _lane_axis(axis, x.ndim)
        return Dual(sum(x.v, axis, keepdims), sum(x.d, lane_axis, keepdims), x.tag)
    if isinstance(x, Tensor):
        return x.sum(axis=axis, keepdims=keepdims)
    return np.sum(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None):
    n = int(np.prod(np.shape(value(x)))) if axis is None else np.shape(value(x))[axis]
    return sum(x, axis) / n


def reshape(x, shape):
    if isinstance(x, Dual):
        shape = tuple(shape)
        return Dual(reshape(x.v, shape), reshape(x.d, (x.lanes,) + shape), x.tag)
    if isinstance(x, Tensor):
        return x.reshape(shape)
    return np.reshape(x, shape)


def _join(items, axis, fn, tensor_fn, grows):
    t = max(_tag_of(a) for a in items)
    if t > 0:
        lanes = next(a.lanes for a in items if _tag_of(a) == t)
        ndim = len(np.shape(value(items[0]))) + grows
        vs, ds = [], []
        for a in items:
            if _tag_of(a) == t:
                vs.append(a.v)
                ds.append(a.d)
            else:
                vs.append(a)
                ds.append(np.zeros((lanes,) + np.shape(value(a)), dtype=value(a).dtype))
        return Dual(_join(vs, axis, fn, tensor_fn, grows),
                    _join(ds, _lane_axis(axis, ndim), fn, tensor_fn, grows), t)
    if any(isinstance(a, Tensor) for a in items):
        return tensor_fn(items, axis)
    return fn([np.asarray(a) for a in items], axis=axis)


def _tensor_concat(items, axis):
    vals = [a.value if isinstance(a, Tensor) else np.asarray(a) for a in items]
    out = np.concatenate(vals, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in vals])[:-1]
    edges = []
    for i, a in enumerate(items):
        if isinstance(a, Tensor):
            edges.append((a, lambda g, i=i: np.split(g, sizes, axis=axis)[i]))
    return Tensor(out, tuple(edges))


def _tensor_stack(items, axis):
    vals = [a.value if isinstance(a, Tensor) else np.asarray(a) for a in items]
    out = np.stack(vals, axis=axis)
    edges = []
    for i, a in enumerate(items):
        if isinstance(a, Tensor):
            edges.append((a, lambda g, i=i: np.take(g, i, axis=axis)))
    return Tensor(out, tuple(edges))


def concat(items, axis=-1):
    return _join(list(items), axis, np.concatenate, _tensor_concat, 0)


def stack(items, axis=-1):
    return _join(list(items), axis, np.stack, _tensor_stack, 1)


def column(x, i):
    """``x[..., i]`` for any supported type."""
    return x[..., i]


def dot(a, b, keepdims=False):
    """Row-wise inner product over the last axis."""
    return sum(a * b, axis=-1, keepdims=keepdims)


def jacobian_trace(fn, x):
    """Trace of the Jacobian of ``fn`` at each row of ``x``.

    ``x`` has shape (B, d) and ``fn`` maps (N, d) -> (N, d) row-wise.  The d
    tangent seeds e_1..e_d ride as d lanes of one dual, so the primal is
    evaluated once and each layer pushes all d tangents together.  Returns
    ``(fn(x), trace)`` where ``fn(x)`` keeps any outer perturbations of ``x``.
    """
    batch, dim = np.shape(value(x))
    tag = new_tag()
    eye = np.eye(dim, dtype=value(x).dtype)
    seeds = np.ascontiguousarray(np.broadcast_to(eye[:, None, :], (dim, batch, dim)))
    out = fn(Dual(x, seeds, tag))
    du = tangent(out, tag)
    trace = sum(sum(du * seeds, axis=-1), axis=0)
    return primal(out, tag), trace
