"""Command-line front end: ``idensenet {train,eval,sample,invert-check,density-grid,analyze,bound}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.optimize import minimize_scalar

from . import checkpoint as ckpt
from .activations import clipswish_bound, lipswish_slope_array, make_activation
from .config import ConfigError, RunConfig
from .experiments import REPORT_DIMS, sample_toy, table_report
from .inversion import DEFAULT_MAX_ITER, DEFAULT_TOL, InversionError, invert_model, round_trip_error
from .likelihood import ESTIMATORS, Estimator, log_prob
from .training import TrainingAborted, lipschitz_check, run_streams, train

log = logging.getLogger("idensenet")


# ---------------------------------------------------------------------------
# command implementations (importable, return plain data)
# ---------------------------------------------------------------------------


def cmd_train(config, resume=None, verbose=True):
    def progress(it, value):
        if verbose and it % max(config.log_every * 10, 1) == 0:
            log.info("iteration %d  train nll %.4f", it, value)

    return train(config, resume=resume, progress=progress)


def _load_model(path):
    state = ckpt.load(path)
    state.model.refresh_spectral()
    return state


def _eval_data(dataset, n, rng):
    if dataset.replace("_", "").lower() in ("standardnormal", "normal"):
        return rng.standard_normal((n, 2))
    return sample_toy(dataset, n, rng)


@dataclass
class EvalReport:
    nll: float
    stderr: float
    estimator: str
    n: int
    block_logdet: list
    lipschitz_ok: bool

    def to_dict(self):
        return dict(vars(self))


def cmd_eval(checkpoint_path, dataset=None, estimator="exact", n=10_000, seed=None, n_probes=None):
    """Test NLL in nats with the standard error of the mean and per-block mean log-determinants."""
    state = _load_model(checkpoint_path)
    cfg = state.config
    seed = cfg.seed if seed is None else seed
    data_rng = run_streams(seed)[3]
    probe_rng = np.random.default_rng([seed, 1])
    est = Estimator(
        estimator,
        cfg.n_terms,
        cfg.n_probes if n_probes is None else n_probes,
        cfg.geom_p,
        cfg.n_exact_terms,
    )
    x = _eval_data(dataset or cfg.dataset, n, data_rng)
    logps, per_block = [], []
    for start in range(0, n, 5000):
        lp, estimates = log_prob(state.model, x[start : start + 5000], est, probe_rng)
        logps.append(lp)
        per_block.append([e.value for e in estimates])
    lp = np.concatenate(logps)
    blocks = [float(np.mean(np.concatenate([chunk[k] for chunk in per_block]))) for k in range(len(state.model.blocks))]
    _, ok = lipschitz_check(state.model)
    return EvalReport(float(-lp.mean()), float(lp.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan, estimator, n, blocks, ok)


def cmd_sample(checkpoint_path, n, tol=DEFAULT_TOL, seed=0, max_iter=DEFAULT_MAX_ITER):
    """Draw ``z ~ N(0, I)`` and invert the flow; returns an ``(n, d)`` array."""
    state = _load_model(checkpoint_path)
    z = np.random.default_rng(seed).standard_normal((n, state.model.dim))
    return invert_model(state.model, z, tol, max_iter)


def cmd_invert_check(checkpoint_path, n=1000, tol=DEFAULT_TOL, seed=0):
    """Largest ``|x - F^{-1}(F(x))|`` over ``n`` points drawn from the run's dataset."""
    state = _load_model(checkpoint_path)
    x = sample_toy(state.config.dataset, n, np.random.default_rng(seed))
    return round_trip_error(state.model, x, tol)


@dataclass
class DensityGrid:
    xs: np.ndarray
    ys: np.ndarray
    density: np.ndarray  # shape (resolution, resolution), rows follow ys
    bounds: tuple

    @property
    def cell_area(self):
        x0, x1, y0, y1 = self.bounds
        return (x1 - x0) * (y1 - y0) / self.density.size

    def mass(self):
        return float(self.density.sum() * self.cell_area)

    def components(self, threshold=0.25):
        """Connected regions where density exceeds ``threshold * max``."""
        mask = self.density > threshold * self.density.max()
        _, count = ndimage.label(mask)
        return int(count)


def density_grid(model, bounds=(-4.0, 4.0, -4.0, 4.0), resolution=100, chunk=5000):
    x0, x1, y0, y1 = bounds
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if not (x1 > x0 and y1 > y0):
        raise ValueError("bounds must be (xmin, xmax, ymin, ymax) with min < max")
    # cell centres
    xs = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    ys = y0 + (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    lp = np.concatenate([log_prob(model, pts[i : i + chunk])[0] for i in range(0, len(pts), chunk)])
    return DensityGrid(xs, ys, np.exp(lp).reshape(resolution, resolution), tuple(bounds))


def cmd_density_grid(checkpoint_path, bounds=(-4.0, 4.0, -4.0, 4.0), resolution=100):
    state = _load_model(checkpoint_path)
    return density_grid(state.model, bounds, resolution)


# colour ramp for the heat image: dark blue -> teal -> yellow
_RAMP = np.array([[13, 8, 135], [33, 145, 140], [94, 201, 98], [253, 231, 37]], dtype=np.float64)


def heat_rgb(values):
    v = np.asarray(values, dtype=np.float64)
    top = v.max()
    t = v / top if top > 0 else np.zeros_like(v)
    pos = t * (len(_RAMP) - 1)
    lo = np.clip(np.floor(pos).astype(int), 0, len(_RAMP) - 2)
    frac = (pos - lo)[..., None]
    rgb = _RAMP[lo] * (1 - frac) + _RAMP[lo + 1] * frac
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def write_ppm(path, density):
    """Binary P6 image; the top row shows the largest y."""
    rgb = heat_rgb(density[::-1])
    h, w = density.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def read_ppm(path):
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3).reshape(h, w, 3)


def write_grid_csv(path, grid):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "density"])
        for j, y in enumerate(grid.ys):
            for i, x in enumerate(grid.xs):
                writer.writerow([repr(float(x)), repr(float(y)), repr(float(grid.density[j, i]))])


def cmd_analyze(scale=1.0, dims=REPORT_DIMS, n_pairs=100_000, seed=0):
    return table_report(dims=dims, scale=scale, n_pairs=n_pairs, seed=seed)


def _max_slope(slope, beta):
    """Supremum of a scalar slope function over ``x``, by grid then golden-section search."""
    xs = np.linspace(-50.0 / beta, 50.0 / beta, 20001)
    vals = slope(xs)
    i = int(np.clip(np.argmax(vals), 1, len(xs) - 2))
    res = minimize_scalar(lambda t: -slope(t), bracket=(xs[i - 1], xs[i], xs[i + 1]), method="golden", tol=1e-12)
    return float(max(-res.fun, vals[i]))


def activation_bound(activation, beta=None):
    """Lipschitz constant of an activation at a given ``beta`` (ignored where irrelevant).

    For CLipSwish this is the bound of the unnormalised pair
    ``[LipSwish(x), LipSwish(-x)]``, i.e. the divisor the activation uses.
    """
    tag = activation.lower()
    if tag == "clipswish":
        return clipswish_bound(1.0 if beta is None else float(beta))
    if tag == "lipswish":
        b = 1.0 if beta is None else float(beta)
        return _max_slope(lambda x: lipswish_slope_array(x, b), b)
    return float(make_activation(tag).lipschitz)


def cmd_bound(activation="clipswish", betas=(0.1, 0.5, 1.0, 2.0, 5.0)):
    return [(activation, b, activation_bound(activation, b)) for b in betas]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _floats(text):
    return tuple(float(t) for t in text.split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _config_from_args(args):
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out"] = args.out
    if getattr(args, "estimator", None):
        changes["estimator"] = args.estimator
    for key in ("dataset", "iterations", "kind"):
        value = getattr(args, key, None)
        if value is not None:
            changes[key] = value
    return cfg.replace(**changes) if changes else cfg


def build_parser():
    parser = argparse.ArgumentParser(prog="idensenet", description="Invertible dense flows on toy densities.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_checkpoint=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--checkpoint", required=needs_checkpoint, help="checkpoint file")

    p = sub.add_parser("train", help="fit a flow by maximum likelihood")
    common(p)
    p.add_argument("--estimator", choices=ESTIMATORS)
    p.add_argument("--dataset")
    p.add_argument("--iterations", type=int)
    p.add_argument("--kind", choices=("dense", "residual"))

    p = sub.add_parser("eval", help="test negative log-likelihood in nats")
    common(p, needs_checkpoint=True)
    p.add_argument("--estimator", choices=ESTIMATORS, default="exact")
    p.add_argument("--dataset", help="toy dataset or StandardNormal (default: the run's)")
    p.add_argument("-n", type=int, default=10_000)
    p.add_argument("--probes", type=int)

    p = sub.add_parser("sample", help="draw samples by inverting the flow")
    common(p, needs_checkpoint=True)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)

    p = sub.add_parser("invert-check", help="largest round-trip reconstruction error")
    common(p, needs_checkpoint=True)
    p.add_argument("-n", type=int, default=1000)
    p.add_argument("--tol", type=float, default=DEFAULT_TOL)

    p = sub.add_parser("density-grid", help="density on a regular grid as CSV and PPM")
    common(p, needs_checkpoint=True)
    p.add_argument("--resolution", type=int, default=100)
    p.add_argument("--bounds", type=_floats, default=(-4.0, 4.0, -4.0, 4.0), help="xmin,xmax,ymin,ymax")

    p = sub.add_parser("analyze", help="distance-ratio table as CSV")
    common(p)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--dims", type=_ints, default=REPORT_DIMS)
    p.add_argument("--pairs", type=int, default=100_000)

    p = sub.add_parser("bound", help="Lipschitz constant of an activation")
    common(p)
    p.add_argument("--activation", default="clipswish")
    p.add_argument("--betas", type=_floats, default=(0.1, 0.5, 1.0, 2.0, 5.0))
    return parser


def _emit(text, out, name):
    if out:
        path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        (path / name).write_text(text)
    sys.stdout.write(text)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, ckpt.CheckpointError, InversionError, ValueError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except TrainingAborted as err:
        print(f"aborted: {err}", file=sys.stderr)
        return 3


def _dispatch(args):
    cmd = args.command
    if cmd == "train":
        cfg = _config_from_args(args)
        result = cmd_train(cfg, resume=args.checkpoint, verbose=args.verbose)
        print(json.dumps({"test_nll": result.test_nll, "iterations": result.iterations, "out": str(result.out_dir)}))
        return 0
    if cmd == "eval":
        report = cmd_eval(args.checkpoint, args.dataset, args.estimator, args.n, args.seed, args.probes)
        _emit(json.dumps(report.to_dict(), indent=2) + "\n", args.out, "eval.json")
        return 0
    if cmd == "sample":
        x = cmd_sample(args.checkpoint, args.n, args.tol, 0 if args.seed is None else args.seed)
        lines = ["x1,x2"] + [",".join(repr(float(v)) for v in row) for row in x]
        _emit("\n".join(lines) + "\n", args.out, "samples.csv")
        return 0
    if cmd == "invert-check":
        err = cmd_invert_check(args.checkpoint, args.n, args.tol, 0 if args.seed is None else args.seed)
        _emit(json.dumps({"max_round_trip_error": err, "n": args.n, "tol": args.tol}) + "\n", args.out, "invert.json")
        return 0
    if cmd == "density-grid":
        if len(args.bounds) != 4:
            raise ValueError("--bounds needs four numbers")
        grid = cmd_density_grid(args.checkpoint, args.bounds, args.resolution)
        out = Path(args.out or ".")
        out.mkdir(parents=True, exist_ok=True)
        write_grid_csv(out / "density.csv", grid)
        write_ppm(out / "density.ppm", grid.density)
        summary = {"mass": grid.mass(), "components": grid.components(), "rows": int(grid.density.size)}
        print(json.dumps(summary))
        return 0
    if cmd == "analyze":
        _emit(cmd_analyze(args.scale, args.dims, args.pairs, 0 if args.seed is None else args.seed), args.out, "ratios.csv")
        return 0
    if cmd == "bound":
        rows = ["activation,beta,bound"] + [f"{a},{b},{v:.7f}" for a, b, v in cmd_bound(args.activation, args.betas)]
        _emit("\n".join(rows) + "\n", args.out, "bound.csv")
        return 0
    raise AssertionError(cmd)


if __name__ == "__main__":
    sys.exit(main())
