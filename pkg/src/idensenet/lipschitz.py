"""Spectral normalisation and Lipschitz bound utilities."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .module import Module


class SpectralWeight(Module):
    """Raw weight matrix plus persistent power-iteration state.

    The effective matrix is ``raw * min(1, coeff / sigma_hat)``; the factor
    is held constant during backpropagation.
    """

    def __init__(self, raw, coeff=0.98, iters_per_step=1, rng=None):
        if not 0 < coeff <= 1:
            raise ValueError(f"coeff must lie in (0, 1], got {coeff}")
        self.raw = Parameter(raw)
        self.coeff = float(coeff)
        self.iters_per_step = int(iters_per_step)
        rng = np.random.default_rng(0) if rng is None else rng
        out_dim, in_dim = self.raw.shape
        u = rng.standard_normal(out_dim)
        self.u = u / np.linalg.norm(u)
        self.v = np.zeros(in_dim)
        self.sigma = 0.0

    @property
    def shape(self):
        return self.raw.shape

    def power_iteration_step(self, n_iter=None):
        """Advance ``u``/``v`` by ``n_iter`` steps and refresh ``sigma``.

        A zero matrix leaves ``u`` untouched and sets ``sigma`` to 0.
        """
        w = self.raw.data
        u = self.u
        v = self.v
        for _ in range(self.iters_per_step if n_iter is None else n_iter):
            v = w.T @ u
            nv = np.linalg.norm(v)
            if nv == 0.0:
                self.sigma = 0.0
                return self.u, self.v, 0.0
            v = v / nv
            wu = w @ v
            u = wu / np.linalg.norm(wu)
        self.u, self.v = u, v
        self.sigma = float(u @ w @ v)
        return u, v, self.sigma

    def converge(self, min_iter=50, max_iter=5000, rtol=1e-13):
        """Run at least ``min_iter`` steps, then continue until sigma stabilises."""
        self.power_iteration_step(min_iter)
        for _ in range(max_iter):
            prev = self.sigma
            self.power_iteration_step(1)
            if abs(self.sigma - prev) <= rtol * max(self.sigma, 1e-300):
                break
        return self.sigma

    def scale(self):
        if self.sigma <= self.coeff or self.sigma == 0.0:
            return 1.0
        return self.coeff / self.sigma

    def effective_weight(self):
        """Taped effective matrix."""
        c = self.scale()
        return self.raw if c == 1.0 else ad.scalar_mul(self.raw, c)

    def effective_array(self):
        return self.raw.data * self.scale()


def power_iteration_step(weight, n_iter=None):
    return weight.power_iteration_step(n_iter)


def effective_weight(weight):
    return weight.effective_weight()


class SpectralLinear(Module):
    """``x -> x W_eff^T + b`` with a spectrally normalised ``W``."""

    def __init__(self, in_dim, out_dim, coeff=0.98, rng=None, bias=True, iters_per_step=1):
        rng = np.random.default_rng() if rng is None else rng
        raw = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(out_dim, in_dim))
        self.weight = SpectralWeight(raw, coeff, iters_per_step, rng)
        self.bias = Parameter(np.zeros(out_dim)) if bias else None
        self.in_dim = in_dim
        self.out_dim = out_dim

    def __call__(self, x, t=None):
        """Return ``(x W_eff^T + b, t W_eff^T)``; ``t`` holds stacked tangents or is None."""
        w = self.weight
        c = w.scale()
        y = ad.linear(x, w.raw, self.bias, c)
        return y, None if t is None else ad.linear(t, w.raw, None, c)

    def apply_pieces(self, pieces, coeffs, tpieces=None):
        """Same map applied to the implicit input ``concat([c_k * piece_k])``."""
        w = self.weight
        c = w.scale()
        y = ad.multi_linear(pieces, coeffs, w.raw, self.bias, c)
        return y, None if tpieces is None else ad.multi_linear(tpieces, coeffs, w.raw, None, c)


def spectral_norm_oracle(w, restarts=5, tol=1e-12, max_iter=100_000, seed=0):
    """Largest singular value by power iteration on ``W^T W`` from several random starts."""
    w = np.asarray(w, dtype=np.float64)
    gram = w.T @ w
    if not np.any(gram):
        return 0.0
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(restarts):
        v = rng.standard_normal(gram.shape[0])
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            gv = gram @ v
            lam = float(v @ gv)
            if np.linalg.norm(gv - lam * v) <= tol * max(lam, 1e-300):
                break
            v = gv / np.linalg.norm(gv)
        best = max(best, lam)
    return float(np.sqrt(best))


def concat_lipschitz_bound(k1, k2, p=2.0):
    """Lipschitz constant of ``[f1; f2]`` under the p-norm, given ``Lip(f1)=k1``, ``Lip(f2)=k2``."""
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    if k1 < 0 or k2 < 0:
        raise ValueError("Lipschitz constants are non-negative")
    if np.isinf(p):
        return float(max(k1, k2))
    return float((k1**p + k2**p) ** (1.0 / p))


def empirical_lipschitz(f, dim, n_pairs, scale=1.0, rng=None, chunk=None):
    """Mean and max of ``||f(v)-f(w)|| / ||v-w||`` for ``v, w ~ N(0, scale^2 I)``.

    ``f`` maps an ``(n, dim)`` array to an ``(n, k)`` array.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    chunk = chunk or max(1, min(n_pairs, 2**19 // max(dim, 1)))
    total = 0.0
    peak = 0.0
    done = 0
    while done < n_pairs:
        n = min(chunk, n_pairs - done)
        v = rng.normal(0.0, scale, size=(n, dim))
        w = rng.normal(0.0, scale, size=(n, dim))
        dist = np.linalg.norm(v - w, axis=1)
        while np.any(dist == 0.0):
            bad = dist == 0.0
            w[bad] = rng.normal(0.0, scale, size=(int(bad.sum()), dim))
            dist = np.linalg.norm(v - w, axis=1)
        fv = np.asarray(_as_array(f(v)))
        fw = np.asarray(_as_array(f(w)))
        ratio = np.linalg.norm(fv - fw, axis=1) / dist
        total += ratio.sum()
        peak = max(peak, float(ratio.max()))
        done += n
    return total / n_pairs, peak


def _as_array(x):
    return x.data if isinstance(x, Tensor) else x
