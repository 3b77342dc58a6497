"""Log-densities through the change of variables.

Two code paths share the block definitions:

* evaluation (``log_prob``, ``logdet_*``) works on plain arrays; Jacobian
  rows and power-series terms come from vector-Jacobian products replayed
  on a tape recorded once per block;
* training (``log_prob_tensor``) stays on the caller's tape and builds the
  Jacobian from forward tangents, so its log-determinant is differentiable
  with respect to every parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

LOG_2PI = math.log(2.0 * math.pi)
MAX_EXACT_DIM = 16
ESTIMATORS = ("exact", "truncated", "roulette")


class LipschitzViolation(ArithmeticError):
    """``det(I + J_g)`` was not positive, so the block is not a valid flow."""


@dataclass
class Estimator:
    kind: str = "exact"
    n_terms: int = 20
    n_probes: int = 1
    geom_p: float = 0.5
    n_exact_terms: int = 20

    def __post_init__(self):
        if self.kind not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}, got {self.kind!r}")
        if self.kind == "truncated" and (self.n_terms < 1 or self.n_probes < 1):
            raise ValueError("truncated estimator needs n_terms >= 1 and n_probes >= 1")
        if self.kind == "roulette":
            if not 0 < self.geom_p < 1:
                raise ValueError("geom_p must lie in (0, 1)")
            if self.n_probes < 1 or self.n_exact_terms < 0:
                raise ValueError("roulette estimator needs n_probes >= 1 and n_exact_terms >= 0")


@dataclass
class LogDetEstimate:
    value: np.ndarray
    kind: str
    n_terms: int
    n_probes: int
    stderr: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind == "exact" and self.n_probes != 0:
            raise ValueError("exact estimates use no probes")
        if self.kind == "truncated" and self.n_terms < 1:
            raise ValueError("truncated estimates need at least one term")

    @property
    def mean(self):
        return float(np.mean(self.value))


def standard_normal_logpdf(z):
    z = np.asarray(z)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


def _rows(x):
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _g_pullback(block, x):
    return ad.vjp_fn(lambda t: block.g(t)[0], x)


def _rademacher(rng, shape):
    return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0


# ---------------------------------------------------------------------------
# evaluation path
# ---------------------------------------------------------------------------


def jacobian_g(block, x):
    """``J_g`` at each row of ``x``, assembled from ``d`` VJPs with basis cotangents."""
    x = _rows(x)
    b, d = x.shape
    _, pullback = _g_pullback(block, x)
    rows = []
    for i in range(d):
        e = np.zeros((b, d))
        e[:, i] = 1.0
        rows.append(pullback(e))
    return np.stack(rows, axis=1)


def logdet_exact(block, x):
    """``ln|det(I + J_g(x))|`` per row."""
    x = _rows(x)
    d = x.shape[1]
    if d > MAX_EXACT_DIM:
        raise ValueError(f"exact log-determinant limited to d <= {MAX_EXACT_DIM}, got {d}")
    m = np.eye(d) + jacobian_g(block, x)
    sign, val = np.linalg.slogdet(m)
    if np.any(sign <= 0):
        bad = int(np.argmin(sign))
        raise LipschitzViolation(f"det(I + J_g) <= 0 at row {bad}; Lip(g) < 1 is violated")
    return val


def _series_samples(block, x, n_terms, n_probes, rng, weights=None):
    """Per-probe Hutchinson estimates of the log-det power series, shape ``(n_probes, B)``.

    ``weights[k-1]`` multiplies term ``k``; it may be per-probe with shape
    ``(n_terms, n_probes)``.
    """
    x = _rows(x)
    b, d = x.shape
    if n_probes > d:
        # a pullback is linear in its cotangent: with more probes than
        # dimensions it is cheaper to pull back the d basis vectors once per
        # row and apply the resulting J_g to every probe
        jac = jacobian_g(block, x)

        def pullback(w):
            return np.einsum("pbi,bij->pbj", w.reshape(n_probes, b, d), jac).reshape(-1, d)

    else:
        _, pullback = _g_pullback(block, np.tile(x, (n_probes, 1)))
    v = _rademacher(rng, (n_probes * b, d))
    w = v
    acc = np.zeros(n_probes * b)
    for k in range(1, n_terms + 1):
        w = pullback(w)
        term = ((-1.0) ** (k + 1) / k) * np.einsum("ij,ij->i", w, v)
        if weights is not None:
            wk = np.asarray(weights[k - 1])
            term = term * (np.repeat(wk, b) if wk.ndim else wk)
        acc += term
    return acc.reshape(n_probes, b)


def logdet_truncated(block, x, n_terms=20, n_probes=1, rng=None, return_samples=False):
    """Truncated power series with a Rademacher Hutchinson trace estimate."""
    if n_terms < 1 or n_probes < 1:
        raise ValueError("n_terms and n_probes must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    samples = _series_samples(block, x, n_terms, n_probes, rng)
    return samples if return_samples else samples.mean(axis=0)


def roulette_weights(n_exact, counts, geom_p):
    """Term weights for each probe: 1 for the first ``n_exact`` terms, then ``1/P(N >= j)``.

    Returns an array ``(n_exact + max(counts), n_probes)``; terms beyond a
    probe's draw get weight 0.
    """
    counts = np.asarray(counts)
    total = n_exact + int(counts.max())
    k = np.arange(1, total + 1)[:, None]
    j = k - n_exact
    survival = (1.0 - geom_p) ** np.maximum(j - 1, 0)
    w = np.where(j <= 0, 1.0, 1.0 / survival)
    return np.where(j <= counts[None, :], w, 0.0)


def logdet_roulette(block, x, geom_p=0.5, n_probes=1, rng=None, n_exact=0, return_samples=False):
    """Russian-roulette unbiased estimate of the full series.

    Each probe draws ``N ~ Geometric(geom_p)`` on ``{1, 2, ...}`` and evaluates
    ``n_exact + N`` terms, reweighting the random part by inverse survival.
    """
    if not 0 < geom_p < 1:
        raise ValueError("geom_p must lie in (0, 1)")
    rng = np.random.default_rng() if rng is None else rng
    counts = rng.geometric(geom_p, size=n_probes)
    weights = roulette_weights(n_exact, counts, geom_p)
    samples = _series_samples(block, x, weights.shape[0], n_probes, rng, weights)
    return samples if return_samples else samples.mean(axis=0)


def block_logdet(block, x, estimator, rng=None):
    rng = np.random.default_rng() if rng is None else rng
    if estimator.kind == "exact":
        return LogDetEstimate(logdet_exact(block, x), "exact", 0, 0)
    if estimator.kind == "truncated":
        s = logdet_truncated(block, x, estimator.n_terms, estimator.n_probes, rng, return_samples=True)
        return LogDetEstimate(s.mean(0), "truncated", estimator.n_terms, estimator.n_probes, _stderr(s))
    s = logdet_roulette(
        block, x, estimator.geom_p, estimator.n_probes, rng, estimator.n_exact_terms, return_samples=True
    )
    return LogDetEstimate(s.mean(0), "roulette", estimator.n_exact_terms, estimator.n_probes, _stderr(s))


def _stderr(samples):
    p = samples.shape[0]
    if p < 2:
        return None
    return samples.std(axis=0, ddof=1) / math.sqrt(p)


def log_prob(model, x, estimator=None, rng=None):
    """``ln p(x)`` per row and one :class:`LogDetEstimate` per block."""
    estimator = Estimator() if estimator is None else estimator
    x = _rows(x)
    if estimator.kind == "exact" and x.shape[1] > MAX_EXACT_DIM:
        raise ValueError(f"exact estimator is limited to d <= {MAX_EXACT_DIM}")
    rng = np.random.default_rng() if rng is None else rng
    z, cache = model.forward(x)
    estimates = [block_logdet(block, h.data, estimator, rng) for block, h in zip(model.blocks, cache)]
    logp = standard_normal_logpdf(z.data) + sum(e.value for e in estimates)
    return logp, estimates


def nll_nats(model, batch, estimator=None, rng=None, chunk=5000):
    """Mean negative log-likelihood in nats."""
    batch = _rows(batch)
    total = 0.0
    for start in range(0, len(batch), chunk):
        lp, _ = log_prob(model, batch[start : start + chunk], estimator, rng)
        total += float(lp.sum())
    return -total / len(batch)


# ---------------------------------------------------------------------------
# differentiable path
# ---------------------------------------------------------------------------


def block_logdet_tensor(block, h, estimator, rng=None):
    """Return ``(F(h), logdet)`` as taped tensors."""
    b, d = h.shape
    if estimator.kind == "exact":
        basis = Tensor(np.broadcast_to(np.eye(d)[:, None, :], (d, b, d)).copy())
        gx, cols = block.g(h, basis)
        return h + gx, ad.residual_logabsdet(cols)
    rng = np.random.default_rng() if rng is None else rng
    probes = estimator.n_probes
    if estimator.kind == "truncated":
        n_terms = estimator.n_terms
        weights = np.ones((n_terms, probes))
    else:
        counts = rng.geometric(estimator.geom_p, size=probes)
        weights = roulette_weights(estimator.n_exact_terms, counts, estimator.geom_p)
        n_terms = weights.shape[0]
    # all probes advance together as stacked tangents; a probe whose roulette
    # draw has ended contributes zero weight to later terms
    v = _rademacher(rng, (probes, b, d))
    w = Tensor(v)
    gx = None
    total = None
    for k in range(1, n_terms + 1):
        out, w = block.g(h, w)
        if gx is None:
            gx = out
        coef = (-1.0) ** (k + 1) / k * weights[k - 1] / probes
        term = ad.sum(ad.sum(w * (v * coef[:, None, None]), axis=2), axis=0)
        total = term if total is None else total + term
    return h + gx, total


def log_prob_tensor(model, x, estimator=None, rng=None):
    """Taped ``ln p(x)`` per row; call inside a :class:`~idensenet.autodiff.Tape`."""
    estimator = Estimator() if estimator is None else estimator
    h = ad.as_tensor(x)
    logdet = None
    for block in model.blocks:
        h, ld = block_logdet_tensor(block, h, estimator, rng)
        logdet = ld if logdet is None else logdet + ld
    d = h.shape[1]
    base = ad.sum(h * h, axis=1) * -0.5 + (-0.5 * d * LOG_2PI)
    return base + logdet


def nll_tensor(model, x, estimator=None, rng=None):
    return ad.mean(log_prob_tensor(model, x, estimator, rng)) * -1.0
