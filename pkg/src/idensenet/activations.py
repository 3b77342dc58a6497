"""Lipschitz-bounded activations, their slopes, and the CLipSwish bound.

Each activation exposes ``__call__`` for values and ``with_tangents`` which
also pushes forward tangent vectors (``phi'(x) * t``).  Slopes are built
from autodiff primitives so that Jacobian-based log-determinants remain
differentiable with respect to every parameter, including ``beta``.
"""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import expit

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .module import Module

LIPSWISH_SCALE = 1.1
ACTIVATIONS = ("sigmoid", "relu", "crelu", "lipswish", "leakylswish", "clipswish", "identity")

# beta is stored raw and passed through softplus, so the initial beta is softplus(0.5).
BETA_INIT_RAW = 0.5
ALPHA_INIT_RAW = -3.0


def inv_softplus(y):
    """Inverse of ``log(1 + exp(x))`` for ``y > 0``."""
    y = float(y)
    if y <= 0:
        raise ValueError("softplus range is (0, inf)")
    return y + math.log(-math.expm1(-y))


# ---------------------------------------------------------------------------
# functional forms
# ---------------------------------------------------------------------------


def sigmoid(x):
    return ad.sigmoid(x)


def softplus(x):
    return ad.softplus(x)


def relu(x):
    return ad.relu(x)


def lipswish_op(x, beta, scale=1.0 / LIPSWISH_SCALE):
    """Fused primitive ``scale * x * sigmoid(beta * x)``."""
    x, beta = ad.as_tensor(x), ad.as_tensor(beta)
    xd, bd = x.data, beta.data
    u = xd * bd
    s = expit(u)

    def vjp(g):
        sp = s * (1.0 - s)
        gx = g * ((s + u * sp) * scale)
        gb = ad._unbroadcast(g * (xd * xd * sp * scale), bd.shape)
        return gx, gb

    return ad.primitive(xd * s * scale, (x, beta), vjp)


def lipswish_tangent_op(x, beta, t, scale=1.0 / LIPSWISH_SCALE):
    """Fused primitive ``slope(x) * t`` where ``slope`` is the derivative of :func:`lipswish_op`.

    ``t`` may carry extra leading axes (one per tangent direction).
    """
    x, beta, t = ad.as_tensor(x), ad.as_tensor(beta), ad.as_tensor(t)
    xd, bd, td = x.data, beta.data, t.data
    u = xd * bd
    s = expit(u)
    sp = s * (1.0 - s)
    slope = (s + u * sp) * scale

    def vjp(g):
        # d slope / d(beta x) times scale
        k2 = sp * (2.0 + u * (1.0 - 2.0 * s)) * scale
        gtk = g * td * k2
        gx = ad._unbroadcast(gtk * bd, xd.shape)
        gb = ad._unbroadcast(gtk * xd, bd.shape)
        return gx, gb, g * slope

    return ad.primitive(slope * td, (x, beta, t), vjp)


def _clipswish_scale():
    return 1.0 / (LIPSWISH_SCALE * clipswish_lipschitz())


def clipswish_op(x, beta):
    """Fused ``[f(x), f(-x)]`` with ``f`` the normalised LipSwish.

    Since ``sigmoid(-u) = 1 - sigmoid(u)``, ``f(-x) = f(x) - c x`` and one
    sigmoid evaluation serves both halves.
    """
    x, beta = ad.as_tensor(x), ad.as_tensor(beta)
    xd, bd = x.data, beta.data
    c = _clipswish_scale()
    u = xd * bd
    s = expit(u)
    pos = xd * s * c
    n = xd.shape[-1]

    def vjp(g):
        g1, g2 = g[..., :n], g[..., n:]
        gs = g1 + g2
        sp = s * (1.0 - s)
        gx = gs * ((s + u * sp) * c) - g2 * c
        gb = ad._unbroadcast(gs * (xd * xd * sp * c), bd.shape)
        return gx, gb

    return ad.primitive(np.concatenate([pos, pos - xd * c], axis=-1), (x, beta), vjp)


def clipswish_tangent_op(x, beta, t):
    """Fused Jacobian-vector product of :func:`clipswish_op` with tangents ``t``."""
    x, beta, t = ad.as_tensor(x), ad.as_tensor(beta), ad.as_tensor(t)
    xd, bd, td = x.data, beta.data, t.data
    c = _clipswish_scale()
    u = xd * bd
    s = expit(u)
    sp = s * (1.0 - s)
    a = (s + u * sp) * c
    at = a * td
    n = xd.shape[-1]

    def vjp(g):
        g1, g2 = g[..., :n], g[..., n:]
        gs = g1 + g2
        k2 = sp * (2.0 + u * (1.0 - 2.0 * s)) * c
        gtk = gs * td * k2
        gx = ad._unbroadcast(gtk * bd, xd.shape)
        gb = ad._unbroadcast(gtk * xd, bd.shape)
        return gx, gb, gs * a - g2 * c

    return ad.primitive(np.concatenate([at, at - td * c], axis=-1), (x, beta, t), vjp)


def lipswish(x, beta):
    """``x * sigmoid(beta * x) / 1.1``; ``beta`` may be a float or a Tensor."""
    return lipswish_op(x, beta)


def lipswish_slope(x, beta):
    x = ad.as_tensor(x)
    return lipswish_tangent_op(x, beta, np.ones(x.shape))


def crelu(x):
    x = ad.as_tensor(x)
    return ad.concat_features([ad.relu(x), ad.relu(-x)])


def clipswish(x, beta):
    """Composite reference for :func:`clipswish_op`."""
    x = ad.as_tensor(x)
    both = ad.concat_features([x, -x])
    return lipswish_op(both, beta, _clipswish_scale())


def leakylswish(x, alpha, beta):
    x = ad.as_tensor(x)
    return x * alpha + lipswish(x, beta) * (1.0 - alpha)


def lipswish_slope_array(x, beta):
    s = expit(beta * x)
    return (s + beta * x * s * (1.0 - s)) / LIPSWISH_SCALE


def clipswish_jacobian_norm(x, beta):
    """``sqrt(phi1'(x)^2 + phi2'(x)^2)`` for the unnormalised pair ``[LipSwish(x), LipSwish(-x)]``."""
    return np.hypot(lipswish_slope_array(x, beta), lipswish_slope_array(-x, beta))


@lru_cache(maxsize=256)
def clipswish_bound(beta, grid_points=20001):
    """Supremum over x of the Jacobian norm of ``[LipSwish(x); LipSwish(-x)]``.

    A dense grid over ``[-50/beta, 50/beta]`` locates the maximiser, then a
    golden-section search refines it.
    """
    beta = float(beta)
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    xs = np.linspace(-50.0 / beta, 50.0 / beta, grid_points)
    vals = clipswish_jacobian_norm(xs, beta)
    i = int(np.clip(np.argmax(vals), 1, grid_points - 2))
    res = minimize_scalar(
        lambda t: -clipswish_jacobian_norm(t, beta),
        bracket=(xs[i - 1], xs[i], xs[i + 1]),
        method="golden",
        tol=1e-12,
    )
    return float(max(-res.fun, vals[i]))


def clipswish_lipschitz():
    """Normaliser used by CLipSwish.

    The Jacobian norm depends on x only through ``beta * x``, so the
    supremum is the same for every beta; it is computed once.
    """
    return clipswish_bound(1.0)


# ---------------------------------------------------------------------------
# activation modules
# ---------------------------------------------------------------------------


class Activation(Module):
    """Base class; ``with_tangents(x, t)`` returns ``(phi(x), phi'(x) * t)``.

    ``t`` is ``None`` or a tensor of shape ``(k, *x.shape)`` holding ``k``
    tangent directions.
    """

    tag = "identity"
    expansion = 1
    lipschitz = 1.0

    def __call__(self, x):
        return self.with_tangents(ad.as_tensor(x), None)[0]

    def with_tangents(self, x, t):
        return x, t

    def __repr__(self):
        return f"{type(self).__name__}()"


class Identity(Activation):
    pass


class Sigmoid(Activation):
    tag = "sigmoid"
    lipschitz = 0.25

    def with_tangents(self, x, t):
        s = ad.sigmoid(x)
        if t is None:
            return s, None
        return s, (s * (1.0 - s)) * t


class ReLU(Activation):
    tag = "relu"

    def with_tangents(self, x, t):
        y = ad.relu(x)
        if t is None:
            return y, None
        return y, Tensor((x.data > 0).astype(np.float64)) * t


class CReLU(Activation):
    tag = "crelu"
    expansion = 2

    def with_tangents(self, x, t):
        y = crelu(x)
        if t is None:
            return y, None
        pos = Tensor((x.data > 0).astype(np.float64))
        neg = Tensor((x.data < 0).astype(np.float64))
        return y, ad.concat_features([pos * t, -(neg * t)])


class LipSwish(Activation):
    tag = "lipswish"

    def __init__(self):
        self.raw_beta = Parameter(np.array([BETA_INIT_RAW]))

    @property
    def beta(self):
        return ad.softplus(self.raw_beta)

    def with_tangents(self, x, t):
        beta = self.beta
        y = lipswish_op(x, beta)
        return y, None if t is None else lipswish_tangent_op(x, beta, t)


class LeakyLSwish(LipSwish):
    tag = "leakylswish"

    def __init__(self):
        super().__init__()
        self.raw_alpha = Parameter(np.array([ALPHA_INIT_RAW]))

    @property
    def alpha(self):
        return ad.sigmoid(self.raw_alpha)

    def with_tangents(self, x, t):
        alpha = self.alpha
        keep = 1.0 - alpha
        beta = self.beta
        y = x * alpha + lipswish_op(x, beta) * keep
        if t is None:
            return y, None
        return y, t * alpha + lipswish_tangent_op(x, beta, t) * keep


class CLipSwish(LipSwish):
    """``[LipSwish(x); LipSwish(-x)] / Lip``; doubles the feature width."""

    tag = "clipswish"
    expansion = 2

    def with_tangents(self, x, t):
        beta = self.beta
        y = clipswish_op(x, beta)
        return y, None if t is None else clipswish_tangent_op(x, beta, t)


_REGISTRY = {
    "identity": Identity,
    "sigmoid": Sigmoid,
    "relu": ReLU,
    "crelu": CReLU,
    "lipswish": LipSwish,
    "leakylswish": LeakyLSwish,
    "clipswish": CLipSwish,
}


def make_activation(tag):
    try:
        return _REGISTRY[tag.lower()]()
    except KeyError:
        raise ValueError(f"unknown activation {tag!r}; choose from {', '.join(ACTIVATIONS)}") from None


def expansion_of(tag):
    return _REGISTRY[tag.lower()].expansion
