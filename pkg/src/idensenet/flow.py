"""Invertible dense blocks, the matched residual baseline, and the flow stack.

Every block exposes ``g(x, t) -> (g(x), J_g(x) t)`` and ``__call__(x) = x + g(x)``.
``t`` is either None or a tensor of shape ``(k, B, d)`` holding ``k``
tangent directions per row; pushing the identity basis through gives the
Jacobian columns that the log-determinant code needs on the tape.
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .activations import inv_softplus, make_activation
from .autodiff import Parameter, Tensor
from .lipschitz import SpectralLinear, SpectralWeight
from .module import Module

SQRT_HALF = math.sqrt(0.5)
ETA_INIT_RAW = inv_softplus(1.0)  # ln(e - 1): softplus gives exactly 1


class LearnableConcat(Module):
    """Weights on the copy / transformed halves, normalised to the unit circle."""

    learnable = True

    def __init__(self, raw_eta1=ETA_INIT_RAW, raw_eta2=ETA_INIT_RAW):
        self.raw_eta1 = Parameter(np.array([raw_eta1]))
        self.raw_eta2 = Parameter(np.array([raw_eta2]))

    def scales(self):
        e1 = ad.softplus(self.raw_eta1)
        e2 = ad.softplus(self.raw_eta2)
        # sqrt(e^2 / |e|^2) rather than e / |e|: equal weights then give a
        # correctly rounded sqrt(1/2)
        sq1, sq2 = e1 * e1, e2 * e2
        total = sq1 + sq2
        return ad.sqrt(sq1 / total), ad.sqrt(sq2 / total)

    def values(self):
        e1 = np.logaddexp(0.0, self.raw_eta1.data[0])
        e2 = np.logaddexp(0.0, self.raw_eta2.data[0])
        m = max(e1, e2)
        a, b = e1 / m, e2 / m
        return math.sqrt(a * a / (a * a + b * b)), math.sqrt(b * b / (a * a + b * b))


class FixedConcat(Module):
    """Both halves scaled by 1/sqrt(2)."""

    learnable = False

    def scales(self):
        return SQRT_HALF, SQRT_HALF

    def values(self):
        return SQRT_HALF, SQRT_HALF


def make_concat(mode):
    if mode == "learnable":
        return LearnableConcat()
    if mode == "fixed":
        return FixedConcat()
    raise ValueError(f"concat mode must be 'learnable' or 'fixed', got {mode!r}")


class DenseLayer(Module):
    """``x -> [eta1 * x ; eta2 * phi(W x + b)]``.

    ``growth`` counts post-activation features; activations that double their
    input (CLipSwish, CReLU) get a linear map of width ``growth // 2``.
    """

    def __init__(self, in_dim, growth, activation="clipswish", concat="learnable", coeff=0.98, rng=None):
        self.activation = make_activation(activation)
        e = self.activation.expansion
        if growth < e or growth % e:
            raise ValueError(f"growth {growth} must be a positive multiple of {e} for {activation}")
        self.linear = SpectralLinear(in_dim, growth // e, coeff, rng)
        self.concat = make_concat(concat)
        self.in_dim = in_dim
        self.out_dim = in_dim + growth

    def __call__(self, x, t=None):
        if x.shape[-1] != self.in_dim:
            raise ad.ShapeError("dense_layer", x.shape, (self.in_dim,))
        pre, pre_t = self.linear(x, t)
        act, act_t = self.activation.with_tangents(pre, pre_t)
        e1, e2 = self.concat.scales()
        out = ad.weighted_concat(x, act, e1, e2)
        if t is None:
            return out, None
        return out, ad.weighted_concat(t, act_t, e1, e2)

    def extend(self, pieces, coeffs, tpieces=None):
        """Piecewise form of :meth:`__call__`.

        The layer input is ``concat([c_k * piece_k])``.  The output appends
        the activation as a new piece and multiplies every old coefficient
        by ``eta1``, so no concatenated array is ever materialised.
        """
        pre, pre_t = self.linear.apply_pieces(pieces, coeffs, tpieces)
        act, act_t = self.activation.with_tangents(pre, pre_t)
        e1, e2 = self.concat.scales()
        coeffs = [c * e1 for c in coeffs] + [e2]
        pieces = pieces + [act]
        if tpieces is not None:
            tpieces = tpieces + [act_t]
        return pieces, coeffs, tpieces

    def lipschitz_bound(self):
        e1, e2 = self.concat.values()
        lower = self.linear.weight.coeff * self.activation.lipschitz
        return math.hypot(e1, e2 * lower)


class DenseBlock(Module):
    """Residual map ``F(x) = x + g(x)`` with ``g = W_{n+1} o h_n o ... o h_1``."""

    def __init__(self, dim, depth=3, growth=32, activation="clipswish", concat="learnable", coeff=0.98, rng=None):
        self.dim = dim
        self.layers = []
        width = dim
        for _ in range(depth):
            layer = DenseLayer(width, growth, activation, concat, coeff, rng)
            self.layers.append(layer)
            width = layer.out_dim
        self.proj = SpectralLinear(width, dim, coeff, rng)

    def g(self, x, t=None):
        pieces, coeffs = [x], [1.0]
        tpieces = None if t is None else [t]
        for layer in self.layers:
            pieces, coeffs, tpieces = layer.extend(pieces, coeffs, tpieces)
        return self.proj.apply_pieces(pieces, coeffs, tpieces)

    def g_concat(self, x, t=None):
        """Reference form of :meth:`g` that materialises every concatenation."""
        h = x
        for layer in self.layers:
            h, t = layer(h, t)
        return self.proj(h, t)

    def __call__(self, x):
        x = ad.as_tensor(x)
        return x + self.g(x)[0]

    def lipschitz_bound(self):
        bound = self.proj.weight.coeff
        for layer in self.layers:
            bound *= layer.lipschitz_bound()
        return bound


class ResidualBlock(Module):
    """Plain residual baseline: linear/activation chain without concatenation."""

    def __init__(self, dim, widths, activation="clipswish", coeff=0.98, rng=None):
        self.dim = dim
        self.linears = []
        self.activations = []
        in_dim = dim
        for w in widths:
            act = make_activation(activation)
            self.linears.append(SpectralLinear(in_dim, w, coeff, rng))
            self.activations.append(act)
            in_dim = w * act.expansion
        self.proj = SpectralLinear(in_dim, dim, coeff, rng)

    def g(self, x, t=None):
        h = x
        for lin, act in zip(self.linears, self.activations):
            h, t = lin(h, t)
            h, t = act.with_tangents(h, t)
        return self.proj(h, t)

    def __call__(self, x):
        x = ad.as_tensor(x)
        return x + self.g(x)[0]

    def lipschitz_bound(self):
        bound = self.proj.weight.coeff
        for lin, act in zip(self.linears, self.activations):
            bound *= lin.weight.coeff * act.lipschitz
        return bound


class LinearBlock(Module):
    """``g(x) = x A^T + b`` with a fixed matrix; used for closed-form checks."""

    def __init__(self, matrix, bias=None):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        self.dim = self.matrix.shape[0]
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self._at = Tensor(self.matrix.T)

    def g(self, x, t=None):
        y = ad.matmul(x, self._at)
        if self.bias is not None:
            y = y + self.bias
        return y, None if t is None else ad.matmul(t, self._at)

    def __call__(self, x):
        x = ad.as_tensor(x)
        return x + self.g(x)[0]

    def lipschitz_bound(self):
        return float(np.linalg.norm(self.matrix, 2))


class FlowModel(Module):
    """Ordered blocks mapping data ``x`` to latent ``z`` under a standard normal base."""

    def __init__(self, blocks, dim, config=None):
        self.blocks = list(blocks)
        self.dim = dim
        self.config = config
        self.assign_names()

    def forward(self, x):
        """Return ``(z, inputs)`` where ``inputs[k]`` is the input of block ``k``."""
        h = ad.as_tensor(x)
        cache = []
        for block in self.blocks:
            cache.append(h)
            h = block(h)
        return h, cache

    def spectral_weights(self):
        return [m for m in self.modules() if isinstance(m, SpectralWeight)]

    def power_iteration_step(self, n_iter=None):
        for w in self.spectral_weights():
            w.power_iteration_step(n_iter)

    def refresh_spectral(self, min_iter=50):
        """Re-estimate every spectral norm to convergence before evaluation."""
        for w in self.spectral_weights():
            w.converge(min_iter=min_iter)

    def concat_modules(self):
        return [m for m in self.modules() if isinstance(m, LearnableConcat)]

    def eta_values(self):
        return [m.values() for m in self.concat_modules()]


def model_forward(model, x):
    return model.forward(x)


@dataclass
class ModelConfig:
    dim: int = 2
    n_blocks: int = 10
    depth: int = 3
    growth: int = 32
    activation: str = "clipswish"
    concat: str = "learnable"
    coeff: float = 0.98
    kind: str = "dense"
    residual_widths: list | None = None
    identity_init: bool = False

    def to_dict(self):
        return asdict(self)


@lru_cache(maxsize=None)
def _activation_param_count(tag):
    act = make_activation(tag)
    return act.num_parameters(), act.expansion


def dense_block_param_count(dim, depth, growth, activation, concat):
    n_act, e = _activation_param_count(activation)
    pre = growth // e
    total = 0
    width = dim
    for _ in range(depth):
        total += width * pre + pre + n_act + (2 if concat == "learnable" else 0)
        width += growth
    return total + width * dim + dim


def residual_block_param_count(dim, widths, activation):
    n_act, e = _activation_param_count(activation)
    total = 0
    in_dim = dim
    for w in widths:
        total += in_dim * w + w + n_act
        in_dim = w * e
    return total + in_dim * dim + dim


def matched_residual_widths(dim, depth, growth, activation, concat="learnable"):
    """Hidden widths giving a residual block the parameter count of a dense block.

    All hidden layers share a width except the last, which is tuned to close
    the remaining gap.
    """
    target = dense_block_param_count(dim, depth, growth, activation, concat)
    if depth == 0:
        return []
    best = None
    for w in range(1, 4 * (growth + dim) + 2):
        for last in range(1, 3 * w + 2):
            widths = [w] * (depth - 1) + [last]
            diff = abs(residual_block_param_count(dim, widths, activation) - target)
            key = (diff, abs(last - w))
            if best is None or key < best[0]:
                best = (key, widths)
    return best[1]


def build_model(config=None, rng=None, **overrides):
    """Construct a freshly initialised :class:`FlowModel`."""
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig(**{**config.to_dict(), **overrides})
    validate_config(config)
    rng = np.random.default_rng(0) if rng is None else rng
    blocks = []
    for _ in range(config.n_blocks):
        if config.kind == "dense":
            blocks.append(
                DenseBlock(config.dim, config.depth, config.growth, config.activation, config.concat, config.coeff, rng)
            )
        else:
            widths = config.residual_widths
            if widths is None:
                widths = matched_residual_widths(config.dim, config.depth, config.growth, config.activation, config.concat)
                config.residual_widths = list(widths)
            blocks.append(ResidualBlock(config.dim, widths, config.activation, config.coeff, rng))
    if config.identity_init:
        for block in blocks:
            block.proj.weight.raw.data[...] = 0.0
            block.proj.bias.data[...] = 0.0
    model = FlowModel(blocks, config.dim, config)
    model.refresh_spectral()
    return model


def validate_config(config):
    problems = []
    if config.dim < 1:
        problems.append("dim must be >= 1")
    if config.n_blocks < 1:
        problems.append("n_blocks must be >= 1")
    if config.depth < 0:
        problems.append("depth must be >= 0")
    if config.kind not in ("dense", "residual"):
        problems.append(f"kind must be 'dense' or 'residual', not {config.kind!r}")
    if config.concat not in ("learnable", "fixed"):
        problems.append(f"concat must be 'learnable' or 'fixed', not {config.concat!r}")
    if not 0 < config.coeff < 1:
        problems.append("coeff must lie in (0, 1) for invertibility")
    try:
        e = make_activation(config.activation).expansion
        if config.kind == "dense" and config.depth > 0 and (config.growth < e or config.growth % e):
            problems.append(f"growth must be a positive multiple of {e} for {config.activation}")
    except ValueError as err:
        problems.append(str(err))
    if problems:
        raise ValueError("invalid model config: " + "; ".join(problems))
