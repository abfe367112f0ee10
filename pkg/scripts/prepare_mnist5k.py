"""Write the 4000/1000 MNIST IDX split used by the desk-scale recipes."""

import argparse

from prslab.data import prepare_mnist5k

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="data/mnist5k")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for k, p in prepare_mnist5k(args.out, args.test_per_class, args.seed).items():
        print(f"{k}: {p}")
