"""Toy 2-D datasets and the distance-ratio (signal preservation) analysis."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .activations import make_activation
from .autodiff import Tensor
from .lipschitz import empirical_lipschitz

TOY_TAGS = ("TwoMoons", "TwoCircles", "Checkerboard")
_ALIASES = {
    "twomoons": "TwoMoons",
    "moons": "TwoMoons",
    "2moons": "TwoMoons",
    "twocircles": "TwoCircles",
    "circles": "TwoCircles",
    "2circles": "TwoCircles",
    "checkerboard": "Checkerboard",
}

REPORT_ACTIVATIONS = ("sigmoid", "lipswish", "clipswish", "identity")
REPORT_DIMS = (1, 128, 1024)
_DISPLAY = {
    "sigmoid": "Sigmoid",
    "lipswish": "LipSwish",
    "clipswish": "CLipSwish",
    "identity": "Identity",
    "crelu": "CReLU",
    "relu": "ReLU",
    "leakylswish": "LeakyLSwish",
}


def canonical_toy(tag):
    key = str(tag).replace("-", "").replace("_", "").replace(" ", "").lower()
    try:
        return _ALIASES[key]
    except KeyError:
        raise ValueError(f"unknown toy dataset {tag!r}; choose from {', '.join(TOY_TAGS)}") from None


def _two_moons(n, rng):
    n_outer = n // 2
    n_inner = n - n_outer
    t_out = rng.uniform(0.0, np.pi, n_outer)
    t_in = rng.uniform(0.0, np.pi, n_inner)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 0.5 - np.sin(t_in)], axis=1)
    x = np.concatenate([outer, inner]) + rng.normal(0.0, 0.1, size=(n, 2))
    return 2.0 * x + np.array([-1.0, -0.2])


def _two_circles(n, rng):
    n_big = n // 2
    radius = np.where(np.arange(n) < n_big, 1.0, 0.5)
    theta = rng.uniform(0.0, 2.0 * np.pi, n)
    x = radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    return 3.0 * (x + rng.normal(0.0, 0.08, size=(n, 2)))


def _checkerboard(n, rng):
    x1 = rng.uniform(-2.0, 2.0, n)
    u = rng.uniform(0.0, 1.0, n)
    b = rng.integers(0, 2, n)
    x2 = u - 2.0 * b + np.mod(np.floor(x1), 2.0)
    return 2.0 * np.stack([x1, x2], axis=1)


_GENERATORS = {"TwoMoons": _two_moons, "TwoCircles": _two_circles, "Checkerboard": _checkerboard}


def sample_toy(kind, n, rng=None):
    """``n`` samples of shape ``(n, 2)`` from a toy density, rows in random order."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if isinstance(kind, ToyDatasetKind):
        rng = kind.rng() if rng is None else rng
        kind = kind.tag
    rng = np.random.default_rng() if rng is None else rng
    x = _GENERATORS[canonical_toy(kind)](int(n), rng)
    return x[rng.permutation(len(x))]


@dataclass(frozen=True)
class ToyDatasetKind:
    tag: str
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tag", canonical_toy(self.tag))

    def rng(self):
        return np.random.default_rng(self.seed)

    def sample(self, n):
        return sample_toy(self.tag, n, self.rng())


@dataclass(frozen=True)
class RatioStats:
    mean: float
    max: float
    dim: int
    n_pairs: int
    scale: float

    def __post_init__(self):
        if not 0.0 <= self.mean <= self.max + 1e-12:
            raise ValueError(f"expected 0 <= mean <= max, got mean={self.mean}, max={self.max}")


def _as_function(activation):
    if callable(activation) and not isinstance(activation, str):
        act = activation
    else:
        act = make_activation(activation)

    def f(x):
        y = act(Tensor(x)) if not isinstance(act, np.ufunc) else act(x)
        return y.data if isinstance(y, Tensor) else np.asarray(y)

    return f


def ratio_stats(activation, dim, n_pairs=100_000, scale=1.0, rng=None, chunk=None):
    """Mean and max of ``|phi(v) - phi(w)| / |v - w|`` for ``v, w ~ N(0, scale^2 I)``.

    ``activation`` is a tag such as ``"clipswish"`` (parameters at their
    initial values) or any callable on arrays.
    """
    if dim < 1:
        raise ValueError("dim must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    mean, peak = empirical_lipschitz(_as_function(activation), dim, n_pairs, scale, rng, chunk)
    return RatioStats(float(mean), float(peak), int(dim), int(n_pairs), float(scale))


def shared_ratio_stats(activations, dim, n_pairs=100_000, scale=1.0, rng=None, chunk=None):
    """:func:`ratio_stats` for several activations evaluated on the same sampled pairs."""
    if dim < 1 or n_pairs < 1:
        raise ValueError("dim and n_pairs must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    fns = [_as_function(a) for a in activations]
    # about 4 MB per sample array: the loop is memory-bound and small blocks stay in cache
    chunk = chunk or max(1, min(n_pairs, 2**19 // dim))
    totals = np.zeros(len(fns))
    peaks = np.zeros(len(fns))
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
        for i, f in enumerate(fns):
            ratio = np.linalg.norm(f(v) - f(w), axis=1) / dist
            totals[i] += ratio.sum()
            peaks[i] = max(peaks[i], ratio.max())
        done += n
    return {
        a: RatioStats(float(t / n_pairs), float(p), int(dim), int(n_pairs), float(scale))
        for a, t, p in zip(activations, totals, peaks)
    }


def ratio_table(dims=REPORT_DIMS, activations=REPORT_ACTIVATIONS, scale=1.0, n_pairs=100_000, seed=0):
    """Grid of :class:`RatioStats` keyed by ``(activation, dim)``.

    All activations at one dimension see the same sampled pairs.
    """
    by_dim = {
        dim: shared_ratio_stats(activations, dim, n_pairs, scale, np.random.default_rng([seed, d_index]))
        for d_index, dim in enumerate(dims)
    }
    return {(act, dim): by_dim[dim][act] for act in activations for dim in dims}


def table_report(dims=REPORT_DIMS, activations=REPORT_ACTIVATIONS, scale=1.0, n_pairs=100_000, seed=0):
    """CSV text with header ``activation,dim,mean,max``, one row per grid cell."""
    table = ratio_table(dims, activations, scale, n_pairs, seed)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["activation", "dim", "mean", "max"])
    for (act, dim), stats in table.items():
        name = _DISPLAY.get(act, act) if isinstance(act, str) else getattr(act, "__name__", str(act))
        writer.writerow([name, dim, f"{stats.mean:.4f}", f"{stats.max:.4f}"])
    return buf.getvalue()


def read_report(text):
    """Parse :func:`table_report` output into ``{(activation, dim): (mean, max)}``."""
    rows = csv.DictReader(io.StringIO(text))
    return {(r["activation"], int(r["dim"])): (float(r["mean"]), float(r["max"])) for r in rows}
