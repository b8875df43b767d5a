"""Small reverse-mode adjoint engine on numpy arrays.

Values on the tape are numpy arrays (or scalars).  Monte Carlo paths are
carried as independent *lanes* along the last axis: when an input is given
one copy per path, a single reverse sweep seeded with ones returns the
per-path gradient, because no primitive mixes lanes except the explicit
reductions (``total``) and fancy indexing.

Second derivatives of cheap functions are obtained forward-over-reverse:
the same tape is recorded on :class:`Dual` values, and the reverse sweep,
written with the generic primitives below, then carries tangents too.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np
from scipy import special

__all__ = [
    "Active", "Dual", "Tape", "Recording", "SmallHessian", "UnsupportedPrimitive",
    "record", "gradient", "small_hessian",
    "exp", "log", "sqrt", "power", "relu", "maximum", "where", "total", "embed",
    "norm_cdf", "norm_pdf", "norm_ppf", "bvn_cdf", "value_of",
]

MAX_HESSIAN_DIM = 64
_INV_SQRT_2PI = 0.3989422804014327


class UnsupportedPrimitive(TypeError):
    """Raised when a recorded computation uses an operation the tape cannot differentiate."""


# ---------------------------------------------------------------------------
# forward-mode dual numbers (used only for Hessians)


class Dual:
    """First-order forward-mode number: ``value + tangent * eps``."""

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None

    def __init__(self, value, tangent):
        self.value = value
        self.tangent = tangent

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __getitem__(self, idx):
        return Dual(np.asarray(self.value)[idx],
                    np.broadcast_to(self.tangent, np.shape(self.value))[idx])

    def __add__(self, o):
        if isinstance(o, Active):
            return NotImplemented
        if isinstance(o, Dual):
            return Dual(self.value + o.value, self.tangent + o.tangent)
        return Dual(self.value + o, self.tangent)

    __radd__ = __add__

    def __sub__(self, o):
        if isinstance(o, Active):
            return NotImplemented
        if isinstance(o, Dual):
            return Dual(self.value - o.value, self.tangent - o.tangent)
        return Dual(self.value - o, self.tangent)

    def __rsub__(self, o):
        if isinstance(o, Active):
            return NotImplemented
        return Dual(o - self.value, -self.tangent)

    def __mul__(self, o):
        if isinstance(o, Active):
            return NotImplemented
        if isinstance(o, Dual):
            return Dual(self.value * o.value, self.tangent * o.value + self.value * o.tangent)
        return Dual(self.value * o, self.tangent * o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        if isinstance(o, Active):
            return NotImplemented
        if isinstance(o, Dual):
            q = self.value / o.value
            return Dual(q, (self.tangent - q * o.tangent) / o.value)
        return Dual(self.value / o, self.tangent / o)

    def __rtruediv__(self, o):
        if isinstance(o, Active):
            return NotImplemented
        q = o / self.value
        return Dual(q, -q * self.tangent / self.value)

    def __neg__(self):
        return Dual(-self.value, -self.tangent)

    def __pow__(self, p):
        if isinstance(p, (Dual, Active)):
            raise UnsupportedPrimitive("power with a differentiated exponent")
        return Dual(self.value ** p, p * self.value ** (p - 1) * self.tangent)

    def _cmp(self, o):
        return o.value if isinstance(o, Dual) else o

    def __lt__(self, o):
        return self.value < self._cmp(o)

    def __le__(self, o):
        return self.value <= self._cmp(o)

    def __gt__(self, o):
        return self.value > self._cmp(o)

    def __ge__(self, o):
        return self.value >= self._cmp(o)

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangent!r})"


def value_of(x):
    """Strip tape and dual wrappers down to a plain numpy value."""
    while isinstance(x, (Active, Dual)):
        x = x.value
    return x


def _sum_to_shape(g, shape):
    """Reduce a broadcast adjoint back to ``shape``."""
    if isinstance(g, Dual):
        return Dual(_sum_to_shape(g.value, shape),
                    _sum_to_shape(np.broadcast_to(g.tangent, np.shape(g.value)), shape))
    g = np.asarray(g)
    if g.shape == tuple(shape):
        return g
    if g.ndim < len(shape):
        return np.broadcast_to(g, shape)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return np.broadcast_to(g, shape)


def _scatter_add(shape, idx, g):
    if isinstance(g, Dual):
        return Dual(_scatter_add(shape, idx, g.value),
                    _scatter_add(shape, idx, np.broadcast_to(g.tangent, np.shape(g.value))))
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return out


def _bool(mask):
    return np.asarray(value_of(mask), dtype=bool)


# ---------------------------------------------------------------------------
# tape


class Tape:
    """Linear record of one computation; discard after its reverse sweep."""

    def __init__(self):
        self._parents: list[tuple] = []
        self._shapes: list[tuple] = []

    def __len__(self):
        return len(self._parents)

    def variable(self, value) -> "Active":
        if not isinstance(value, Dual):
            value = np.asarray(value, dtype=float)
        return self._push(value, ())

    def _push(self, value, parents) -> "Active":
        self._parents.append(parents)
        self._shapes.append(np.shape(value_of(value)))
        return Active(value, self, len(self._parents) - 1)

    def backward(self, out: "Active", seed=None) -> list:
        if out.tape is not self:
            raise ValueError("output was recorded on a different tape")
        adj: list[Any] = [None] * len(self._parents)
        if seed is None:
            seed = np.ones(self._shapes[out.node_id])
        adj[out.node_id] = seed
        for i in range(out.node_id, -1, -1):
            g = adj[i]
            if g is None:
                continue
            for parent, vjp in self._parents[i]:
                contrib = _sum_to_shape(vjp(g), self._shapes[parent])
                adj[parent] = contrib if adj[parent] is None else adj[parent] + contrib
        return adj


_UFUNCS: dict[Any, Callable] = {}


class Active:
    """A value recorded on a :class:`Tape`."""

    __slots__ = ("value", "tape", "node_id")

    def __init__(self, value, tape: Tape, node_id: int):
        self.value = value
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return np.shape(value_of(self.value))

    @property
    def ndim(self):
        return len(self.shape)

    def __len__(self):
        return self.shape[0]

    def __repr__(self):
        return f"Active({value_of(self.value)!r}, node={self.node_id})"

    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        fn = _UFUNCS.get(ufunc)
        if method != "__call__" or fn is None or kwargs:
            raise UnsupportedPrimitive(f"primitive '{ufunc.__name__}' is not supported on the tape")
        return fn(*inputs)

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __rpow__(self, o):
        raise UnsupportedPrimitive("power with a differentiated exponent")

    # comparisons yield constants
    def __lt__(self, o):
        return value_of(self) < value_of(o)

    def __le__(self, o):
        return value_of(self) <= value_of(o)

    def __gt__(self, o):
        return value_of(self) > value_of(o)

    def __ge__(self, o):
        return value_of(self) >= value_of(o)

    def __bool__(self):
        raise UnsupportedPrimitive("truth value of a recorded value (branch on a comparison instead)")

    def __float__(self):
        raise UnsupportedPrimitive("conversion of a recorded value to float")


def _tape_of(*xs) -> Tape | None:
    tape = None
    for x in xs:
        if isinstance(x, Active):
            if tape is not None and x.tape is not tape:
                raise ValueError("mixing values from different tapes")
            tape = x.tape
    return tape


def _val(x):
    return x.value if isinstance(x, Active) else x


def _node(value, *pairs):
    """Record ``value`` with (operand, vjp) pairs; constant operands are skipped."""
    tape = _tape_of(*(p[0] for p in pairs))
    return tape._push(value, tuple((x.node_id, vjp) for x, vjp in pairs if isinstance(x, Active)))


# ---------------------------------------------------------------------------
# primitives: each accepts plain numbers, Duals or Actives


def add(a, b):
    if isinstance(a, Active) or isinstance(b, Active):
        return _node(_val(a) + _val(b), (a, lambda g: g), (b, lambda g: g))
    return a + b


def sub(a, b):
    if isinstance(a, Active) or isinstance(b, Active):
        return _node(_val(a) - _val(b), (a, lambda g: g), (b, lambda g: -g))
    return a - b


def mul(a, b):
    if isinstance(a, Active) or isinstance(b, Active):
        av, bv = _val(a), _val(b)
        return _node(av * bv, (a, lambda g: g * bv), (b, lambda g: g * av))
    return a * b


def div(a, b):
    if isinstance(a, Active) or isinstance(b, Active):
        av, bv = _val(a), _val(b)
        out = av / bv
        return _node(out, (a, lambda g: g / bv), (b, lambda g: -(g * out) / bv))
    return a / b


def neg(a):
    if isinstance(a, Active):
        return _node(-a.value, (a, lambda g: -g))
    return -a


def exp(a):
    if isinstance(a, Active):
        out = exp(a.value)
        return _node(out, (a, lambda g: g * out))
    if isinstance(a, Dual):
        v = np.exp(a.value)
        return Dual(v, a.tangent * v)
    return np.exp(a)


def log(a):
    if isinstance(a, Active):
        av = a.value
        return _node(log(av), (a, lambda g: g / av))
    if isinstance(a, Dual):
        return Dual(np.log(a.value), a.tangent / a.value)
    return np.log(a)


def sqrt(a):
    if isinstance(a, Active):
        out = sqrt(a.value)
        return _node(out, (a, lambda g: 0.5 * g / out))
    if isinstance(a, Dual):
        v = np.sqrt(a.value)
        return Dual(v, 0.5 * a.tangent / v)
    return np.sqrt(a)


def power(a, p):
    if isinstance(p, (Active, Dual)):
        raise UnsupportedPrimitive("power with a differentiated exponent")
    if isinstance(a, Active):
        av = a.value
        return _node(av ** p, (a, lambda g: g * (p * av ** (p - 1))))
    return a ** p


def relu(a):
    """``max(a, 0)``; the derivative at 0 is taken to be 0."""
    if isinstance(a, Active):
        mask = value_of(a) > 0
        return _node(relu(a.value), (a, lambda g: g * mask))
    if isinstance(a, Dual):
        mask = a.value > 0
        return Dual(np.where(mask, a.value, 0.0), a.tangent * mask)
    return np.maximum(a, 0.0)


def where(mask, a, b):
    """Select ``a`` where the constant ``mask`` holds, else ``b``."""
    mask = _bool(mask)
    if isinstance(a, Active) or isinstance(b, Active):
        return _node(where(mask, _val(a), _val(b)),
                     (a, lambda g: g * mask), (b, lambda g: g * ~mask))
    if isinstance(a, Dual) or isinstance(b, Dual):
        ad = a if isinstance(a, Dual) else Dual(a, 0.0)
        bd = b if isinstance(b, Dual) else Dual(b, 0.0)
        shape = np.broadcast_shapes(mask.shape, np.shape(ad.value), np.shape(bd.value))
        return Dual(np.where(mask, ad.value, bd.value),
                    np.where(mask, np.broadcast_to(ad.tangent, shape), np.broadcast_to(bd.tangent, shape)))
    return np.where(mask, a, b)


def maximum(a, b):
    if np.ndim(value_of(b)) == 0 and not isinstance(b, (Active, Dual)) and b == 0:
        return relu(a)
    return where(value_of(a) > value_of(b), a, b)


def total(a, axis=0):
    """Sum along ``axis`` (mixes lanes only if ``axis`` is the lane axis)."""
    if isinstance(a, Active):
        shape = a.shape
        return _node(total(a.value, axis),
                     (a, lambda g: _expand(g, axis, shape)))
    if isinstance(a, Dual):
        return Dual(np.sum(a.value, axis=axis),
                    np.sum(np.broadcast_to(a.tangent, np.shape(a.value)), axis=axis))
    return np.sum(a, axis=axis)


def _expand(g, axis, shape):
    if isinstance(g, Dual):
        return Dual(_expand(g.value, axis, shape), _expand(g.tangent, axis, shape))
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def _getitem(a: Active, idx):
    shape = a.shape
    return _node(a.value[idx], (a, lambda g: _scatter_add(shape, idx, g)))


def embed(a, idx, n: int):
    """Place ``a`` at positions ``idx`` of a zero vector of length ``n``."""
    if isinstance(a, Active):
        return _node(embed(a.value, idx, n), (a, lambda g: g[idx]))
    if isinstance(a, Dual):
        return Dual(embed(a.value, idx, n),
                    embed(np.broadcast_to(a.tangent, np.shape(a.value)), idx, n))
    out = np.zeros(n)
    out[idx] = a
    return out


def norm_pdf(a):
    if isinstance(a, Active):
        av = a.value
        out = norm_pdf(av)
        return _node(out, (a, lambda g: -(g * av) * out))
    if isinstance(a, Dual):
        v = _INV_SQRT_2PI * np.exp(-0.5 * a.value * a.value)
        return Dual(v, -a.value * v * a.tangent)
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(a))


def norm_cdf(a):
    if isinstance(a, Active):
        av = a.value
        return _node(norm_cdf(av), (a, lambda g: g * norm_pdf(av)))
    if isinstance(a, Dual):
        return Dual(special.ndtr(a.value), norm_pdf(a.value) * a.tangent)
    return special.ndtr(a)


def norm_ppf(a):
    if isinstance(a, Active):
        out = norm_ppf(a.value)
        return _node(out, (a, lambda g: g / norm_pdf(out)))
    if isinstance(a, Dual):
        v = special.ndtri(a.value)
        return Dual(v, a.tangent / norm_pdf(v))
    return special.ndtri(a)


def _bvn_value(h, k, rho):
    h = np.asarray(h, dtype=float)
    k = np.asarray(k, dtype=float)
    h, k = np.broadcast_arrays(h, k)
    tiny = 1e-300
    hh = np.where(h == 0.0, tiny, h)
    kk = np.where(k == 0.0, tiny, k)
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    t_h = special.owens_t(hh, (kk - rho * hh) / (hh * s))
    t_k = special.owens_t(kk, (hh - rho * kk) / (kk * s))
    beta = np.where(hh * kk > 0, 0.0, 0.5)
    out = 0.5 * special.ndtr(hh) + 0.5 * special.ndtr(kk) - t_h - t_k - beta
    return np.clip(out, 0.0, 1.0)


def bvn_cdf(h, k, rho: float):
    """Standard bivariate normal CDF with constant correlation ``rho``."""
    if isinstance(rho, (Active, Dual)):
        raise UnsupportedPrimitive("bvn_cdf with a differentiated correlation")
    s = np.sqrt((1.0 - rho) * (1.0 + rho))
    if isinstance(h, Active) or isinstance(k, Active):
        hv, kv = _val(h), _val(k)
        return _node(bvn_cdf(hv, kv, rho),
                     (h, lambda g: g * (norm_pdf(hv) * norm_cdf((kv - rho * hv) / s))),
                     (k, lambda g: g * (norm_pdf(kv) * norm_cdf((hv - rho * kv) / s))))
    if isinstance(h, Dual) or isinstance(k, Dual):
        hd = h if isinstance(h, Dual) else Dual(h, 0.0)
        kd = k if isinstance(k, Dual) else Dual(k, 0.0)
        dh = norm_pdf(hd.value) * special.ndtr((kd.value - rho * hd.value) / s)
        dk = norm_pdf(kd.value) * special.ndtr((hd.value - rho * kd.value) / s)
        return Dual(_bvn_value(hd.value, kd.value, rho), dh * hd.tangent + dk * kd.tangent)
    return _bvn_value(h, k, rho)


_UFUNCS.update({
    np.add: add, np.subtract: sub, np.multiply: mul, np.true_divide: div,
    np.negative: neg, np.exp: exp, np.log: log, np.sqrt: sqrt, np.power: power,
    np.maximum: maximum,
})


# ---------------------------------------------------------------------------
# user-facing driver


@dataclass
class Recording:
    """Result of :func:`record`: the output value and what is needed to sweep back."""

    value: Any
    tape: Tape
    output: Any
    inputs: dict[str, Active] = field(default_factory=dict)


def record(computation: Callable[..., Any], **inputs) -> Recording:
    """Evaluate ``computation(**inputs)`` on a fresh tape.

    Every keyword becomes a registered input variable.  The returned
    ``value`` is bit-identical to calling ``computation`` on the plain inputs.
    """
    tape = Tape()
    actives = {name: tape.variable(v) for name, v in inputs.items()}
    out = computation(**actives)
    return Recording(value_of(out), tape, out, actives)


def gradient(rec: Recording, seed=None) -> dict[str, np.ndarray]:
    """Reverse sweep; one entry per registered input, zeros included.

    With lane-shaped inputs and the default seed of ones, the entries are
    per-lane (per-path) partial derivatives.
    """
    if not isinstance(rec.output, Active):
        return {name: np.zeros(x.shape) for name, x in rec.inputs.items()}
    adj = rec.tape.backward(rec.output, seed)
    out = {}
    for name, x in rec.inputs.items():
        g = adj[x.node_id]
        out[name] = np.zeros(x.shape) if g is None else np.asarray(value_of(g), dtype=float)
    return out


@dataclass
class SmallHessian:
    """Symmetric Hessian of a scalar (per lane) function of a few variables.

    ``entries`` has shape ``(dim, dim)`` followed by the lane shape.
    ``asymmetry`` is the relative asymmetry seen before symmetrization.
    """

    dim: int
    entries: np.ndarray
    value: np.ndarray
    gradient: np.ndarray
    asymmetry: float


def small_hessian(computation: Callable[[Any], Any], x, max_dim: int = MAX_HESSIAN_DIM) -> SmallHessian:
    """Hessian of ``computation`` at ``x`` by ``dim`` forward-over-reverse sweeps.

    ``x`` has shape ``(dim,)`` or ``(dim, n_lanes)``; the computation must
    return a value with the lane shape.
    """
    x = np.asarray(x, dtype=float)
    dim = x.shape[0]
    if dim > max_dim:
        raise ValueError(
            f"small_hessian: dimension {dim} exceeds the limit {max_dim}; "
            "restructure the estimator so that only the few variables the weight "
            "depends on are differentiated twice")
    lanes = x.shape[1:]
    hess = np.zeros((dim, dim) + lanes)
    grad = np.zeros(x.shape)
    value = None
    for k in range(dim):
        tangent = np.zeros(x.shape)
        tangent[k] = 1.0
        tape = Tape()
        leaf = tape.variable(Dual(x, tangent))
        out = computation(leaf)
        if not isinstance(out, Active):
            value = np.broadcast_to(value_of(out), lanes).copy()
            continue
        value = np.asarray(out.value.value)
        seed = Dual(np.ones(out.shape), np.zeros(out.shape))
        adj = tape.backward(out, seed)[leaf.node_id]
        if adj is None:
            continue
        grad = np.asarray(adj.value, dtype=float)
        hess[:, k] = np.broadcast_to(adj.tangent, x.shape)
    swapped = np.swapaxes(hess, 0, 1)
    scale = max(1.0, float(np.max(np.abs(hess)))) if hess.size else 1.0
    asym = float(np.max(np.abs(hess - swapped))) / scale if hess.size else 0.0
    return SmallHessian(dim, 0.5 * (hess + swapped), value, grad, asym)
