"""Train i-DenseNet+LC and the matched residual baseline on every toy dataset.

Each run writes to ``<root>/<Dataset>-<kind>/`` and is skipped when its
``result.json`` already exists; an interrupted run resumes from its
checkpoint.  Usage::

    python scripts/toy_suite.py [--root runs/toy] [--iterations 50000]
"""

import argparse
import logging
from pathlib import Path

from idensenet.config import RunConfig
from idensenet.experiments import TOY_TAGS
from idensenet.training import train


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default="runs/toy")
    parser.add_argument("--iterations", type=int, default=50_000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--datasets", nargs="*", default=list(TOY_TAGS))
    parser.add_argument("--kinds", nargs="*", default=["dense", "residual"])
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    for dataset in args.datasets:
        for kind in args.kinds:
            out = Path(args.root) / f"{dataset}-{kind}"
            if (out / "result.json").exists():
                logging.info("skip %s (done)", out)
                continue
            config = RunConfig(
                dataset=dataset, kind=kind, iterations=args.iterations, seed=args.seed, out=str(out), log_every=500
            )
            resume = out / "checkpoint.bin"
            resume = resume if resume.exists() else None
            logging.info("train %s%s", out, " (resuming)" if resume else "")
            result = train(config, resume=resume)
            logging.info("%s: test NLL %.4f in %.0f s", out, result.test_nll, result.seconds)


if __name__ == "__main__":
    main()
