"""Batch-size x seed sweep with per-epoch checkpoint harvesting, then the PRS-ratio regressions.

Equivalent to ``prslab train --config mnist-batchsize-sweep`` followed by
``prslab regress``; extra flags widen the sweep.
"""

import argparse
from pathlib import Path

from prslab.experiment import collect_reports, load_config, run_regress, run_train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", nargs="+", type=int)
    ap.add_argument("--batch-sizes", nargs="+", type=int)
    ap.add_argument("--epochs", type=int)
    ap.add_argument("--data", default="data/mnist5k")
    ap.add_argument("--out", default="runs/batchsize_sweep")
    args = ap.parse_args()

    cfg = load_config("mnist-batchsize-sweep")
    cfg["dataset"]["root"] = args.data
    if args.seeds:
        cfg["sweep"]["seeds"] = args.seeds
    if args.batch_sizes:
        cfg["sweep"]["batch_sizes"] = args.batch_sizes
    if args.epochs:
        cfg["train"]["epochs"] = args.epochs
    out = Path(args.out)
    run_train(cfg, out)
    run_regress(collect_reports([out]), out / "regression")
    print((out / "regression" / "regression.txt").read_text())


if __name__ == "__main__":
    main()
