"""Maximum-likelihood training loop with metrics, checkpoints and final test NLL."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .experiments import sample_toy
from .flow import LearnableConcat, build_model
from .likelihood import Estimator, nll_nats, nll_tensor
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

# max_sigma is the exact spectral norm of the effective weights used by the
# logged step; lipschitz_ok is False when any exceeds its coefficient
METRIC_FIELDS = ("iteration", "train_nll", "eta1_mean", "eta1_min", "eta1_max", "max_sigma", "lipschitz_ok")
LIPSCHITZ_SLACK = 1e-6


class TrainingAborted(RuntimeError):
    """Raised when the loss stops being finite; the last good state is on disk."""

    def __init__(self, iteration, checkpoint_path):
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
        super().__init__(f"non-finite loss at iteration {iteration}; last good state saved to {checkpoint_path}")


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint: Path
    metrics: Path
    test_nll: float
    iterations: int
    seconds: float


def run_streams(seed):
    """Independent RNG streams: model init, training batches, estimator probes, test set."""
    init, data, probes, test = np.random.SeedSequence(seed).spawn(4)
    return (
        np.random.default_rng(init),
        np.random.default_rng(data),
        np.random.default_rng(probes),
        np.random.default_rng(test),
    )


def effective_sigmas(model):
    """Exact largest singular value of every effective weight."""
    return [float(np.linalg.norm(w.effective_array(), 2)) for w in model.spectral_weights()]


def lipschitz_check(model):
    """``(max sigma, ok)`` where ``ok`` means every effective weight is within its coefficient."""
    worst = 0.0
    ok = True
    for w, s in zip(model.spectral_weights(), effective_sigmas(model)):
        worst = max(worst, s)
        if s > w.coeff + LIPSCHITZ_SLACK:
            ok = False
    return worst, ok


def _concat_params(model):
    return [p for m in model.modules() if isinstance(m, LearnableConcat) for p in m.parameters()]


def _eta_summary(model):
    etas = [e1 for e1, _ in model.eta_values()]
    if not etas:
        return math.nan, math.nan, math.nan
    return float(np.mean(etas)), float(np.min(etas)), float(np.max(etas))


def test_nll(model, config, n=None, rng=None):
    """Exact-estimator NLL on a fresh held-out sample (spectral norms refreshed first)."""
    n = config.test_size if n is None else n
    rng = run_streams(config.seed)[3] if rng is None else rng
    x = sample_toy(config.dataset, n, rng)
    model.refresh_spectral()
    return nll_nats(model, x, Estimator("exact"))


def _bit_state(rng):
    return rng.bit_generator.state


def _set_bit_state(rng, state):
    rng.bit_generator.state = state


def train(config, resume=None, progress=None):
    """Train according to ``config``; returns a :class:`TrainResult`.

    Writes ``metrics.csv``, ``config.json``, ``checkpoint.bin`` and
    ``result.json`` under ``config.out``.  ``resume`` names a checkpoint to
    continue from; its RNG streams and optimizer state are restored.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    config.save(out / "config.json")
    ckpt_path = out / "checkpoint.bin"
    metrics_path = out / "metrics.csv"
    init_rng, data_rng, probe_rng, _ = run_streams(config.seed)

    if resume is not None:
        state = ckpt.load(resume)
        model, adam, start = state.model, state.adam, state.iteration
        if adam is None:
            adam = AdamState.init(model.parameters(), lr=config.lr)
        if "data_rng" in state.state:
            _set_bit_state(data_rng, state.state["data_rng"])
            _set_bit_state(probe_rng, state.state["probe_rng"])
        mode = "a"
    else:
        model = build_model(config.model_config(), init_rng)
        adam = AdamState.init(model.parameters(), lr=config.lr)
        start = 0
        mode = "w"

    params = model.parameters()
    lc_params = {id(p) for p in _concat_params(model)}
    estimator = config.estimator_config()

    def snapshot(it):
        rng_state = {"data_rng": _bit_state(data_rng), "probe_rng": _bit_state(probe_rng)}
        return ckpt.save(ckpt_path, config, model, adam, it, rng_state)

    began = time.perf_counter()
    with open(metrics_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(METRIC_FIELDS)
            fh.flush()
        for it in range(start, config.iterations):
            model.power_iteration_step()
            done = it + 1
            logging_now = done % config.log_every == 0 or done == config.iterations
            if logging_now:
                # the weights this step's loss actually uses
                sigma, ok = lipschitz_check(model)
            x = sample_toy(config.dataset, config.batch, data_rng)
            with ad.Tape():
                loss = nll_tensor(model, x, estimator, probe_rng)
            value = float(loss.data)
            if not math.isfinite(value):
                # parameters have not been touched by this step yet
                path = snapshot(it)
                writer.writerow([done, value, *_eta_summary(model), math.nan, False])
                raise TrainingAborted(done, path)
            for p in params:
                p.zero_grad()
            ad.backward(loss)
            if it < config.lc_start_iter:
                for p in params:
                    if id(p) in lc_params:
                        p.grad[...] = 0.0
            adam_step(params, adam)
            if logging_now:
                if sigma >= 1.0:
                    log.warning("iteration %d: effective spectral norm %.6g >= 1, block may not be invertible", done, sigma)
                elif not ok:
                    log.debug("iteration %d: effective spectral norm %.6g exceeds its coefficient", done, sigma)
                writer.writerow([done, repr(value), *map(repr, _eta_summary(model)), repr(sigma), ok])
                fh.flush()
                if progress is not None:
                    progress(done, value)
            if done % config.checkpoint_every == 0:
                snapshot(done)

    final_it = max(start, config.iterations)
    snapshot(final_it)
    nll = test_nll(model, config)
    seconds = time.perf_counter() - began
    result = {"test_nll": nll, "iterations": final_it, "seconds": seconds, "dataset": config.dataset, "kind": config.kind}
    (out / "result.json").write_text(json.dumps(result, indent=2) + "\n")
    return TrainResult(out, ckpt_path, metrics_path, nll, final_it, seconds)
