"""Fixed-point inversion of residual blocks ``F(x) = x + g(x)`` with ``Lip(g) < 1``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100


class InversionError(RuntimeError):
    """Raised when the fixed-point iteration has not met ``tol`` after ``max_iter`` steps."""

    def __init__(self, residual, iterations, block_index=None):
        self.residual = float(residual)
        self.iterations = int(iterations)
        self.block_index = block_index
        where = "" if block_index is None else f" in block {block_index}"
        super().__init__(
            f"fixed-point inversion{where} did not converge after {iterations} iterations "
            f"(last step {self.residual:.3e}); Lip(g) may exceed 1 or tol is too tight"
        )


@dataclass
class InversionTrace:
    """Diagnostics of one :func:`invert_block` call."""

    iterations: int = 0
    residuals: list = field(default_factory=list)


def _array(x):
    x = x.data if isinstance(x, Tensor) else x
    return np.array(x, dtype=np.float64, ndmin=2)


def _g(block, x):
    return block.g(Tensor(x))[0].data


def invert_block(block, y, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, trace=None):
    """Solve ``x + g(x) = y`` by iterating ``x <- y - g(x)`` from ``x = y``.

    Stops when the largest absolute change of an iterate is below ``tol``.
    Pass an :class:`InversionTrace` to record the per-iteration step sizes.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    y = _array(y)
    x = y
    step = math.inf
    for k in range(1, max_iter + 1):
        nxt = y - _g(block, x)
        step = float(np.max(np.abs(nxt - x))) if nxt.size else 0.0
        x = nxt
        if trace is not None:
            trace.iterations = k
            trace.residuals.append(step)
        if step < tol:
            return x
    raise InversionError(step, max_iter)


def invert_model(model, z, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """Map latents back to data by inverting the blocks in reverse order."""
    x = _array(z)
    for index in range(len(model.blocks) - 1, -1, -1):
        try:
            x = invert_block(model.blocks[index], x, tol, max_iter)
        except InversionError as err:
            raise InversionError(err.residual, err.iterations, index) from None
    return x


def iteration_bound(first_step, tol, lipschitz):
    """Upper bound on iterations needed when each step contracts by ``lipschitz``.

    With ``x0 = y`` the first step has size ``first_step``; step ``k`` is at
    most ``lipschitz**(k-1) * first_step``.
    """
    if not 0 <= lipschitz < 1:
        raise ValueError("lipschitz must lie in [0, 1)")
    if first_step < tol:
        return 1
    if lipschitz == 0:
        return 2
    return int(math.floor(math.log(tol / first_step) / math.log(lipschitz))) + 2


def round_trip_error(model, x, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER):
    """``max |x - F^{-1}(F(x))|`` over all entries."""
    x = _array(x)
    z = model.forward(x)[0].data
    return float(np.max(np.abs(invert_model(model, z, tol, max_iter) - x)))
