"""Desk-scale scheme comparison on MNIST-5k with MLP-2.

Trains each scheme, then reports clean/robust accuracy over the epsilon grid,
the PRS ratio, time per epoch and the inclusion/exclusion robustness split.
Writes ``schemes.csv`` and ``groups.csv`` under --out.
"""

import argparse
import csv
import time
from pathlib import Path

import numpy as np

from prslab.attacks import AttackConfig, run_attack
from prslab.experiment import build_model, load_config, load_datasets
from prslab.regions import build_prs, inclusion_split
from prslab.stats import group_robustness_report
from prslab.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--schemes", nargs="+", default=["standard", "mr", "prs"])
    ap.add_argument("--epsilons", nargs="+", type=float, default=[0.0313, 0.05, 0.1])
    ap.add_argument("--seeds", nargs="+", type=int, default=[0])
    ap.add_argument("--data", default="data/mnist5k")
    ap.add_argument("--out", default="runs/schemes")
    args = ap.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = load_config("mnist-desk-prs")
    cfg["dataset"]["root"] = args.data
    train_ds, test_ds = load_datasets(cfg)
    rows, group_rows = [], []
    for seed in args.seeds:
        for scheme in args.schemes:
            tc = TrainConfig(**{**cfg["train"], "scheme": scheme, "seed": seed})
            model = build_model(cfg, train_ds, seed=seed)
            t0 = time.perf_counter()
            model, log = train(model, train_ds, tc, test_dataset=test_ds)
            per_epoch = (time.perf_counter() - t0) / tc.epochs
            l = model.penultimate_index
            rs = build_prs(model, train_ds, l)
            inc, exc, ratio = inclusion_split(model, rs, test_ds, l)
            correct = model.predict(test_ds.inputs) == test_ds.labels
            groups = {"inclusion": inc[correct[inc]][:1000], "exclusion": exc[correct[exc]][:1000]}
            for eps in args.epsilons:
                pgd = AttackConfig("pgd", eps, num_steps=20, seed=seed)
                res = run_attack(model, test_ds, pgd)
                rows.append([seed, scheme, eps, f"{log.last().test_acc:.4f}", f"{(~res.success).mean():.4f}",
                             f"{len(rs) / len(train_ds):.4f}", f"{ratio:.4f}", f"{per_epoch:.2f}"])
                nonempty = {k: v for k, v in groups.items() if len(v)}
                rep = group_robustness_report(model, nonempty, test_ds, pgd) if nonempty else {}
                for name in groups:
                    g = rep.get(name)
                    group_rows.append([seed, scheme, eps, name, len(groups[name]),
                                       "" if g is None else f"{g.robust_accuracy:.4f}"])
                print(f"seed={seed} {scheme:>8} eps={eps:<6} test={log.last().test_acc:.3f} "
                      f"robust={(~res.success).mean():.3f} prs={len(rs) / len(train_ds):.3f} "
                      f"groups=" + ", ".join(f"{k}:{len(v)}/{'-' if rep.get(k) is None else f'{rep[k].robust_accuracy:.3f}'}"
                                            for k, v in groups.items()))
    with open(out / "schemes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "scheme", "epsilon", "test_accuracy", "robust_accuracy", "prs_ratio",
                    "inclusion_ratio", "seconds_per_epoch"])
        w.writerows(rows)
    with open(out / "groups.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["seed", "scheme", "epsilon", "group", "size", "robust_accuracy"])
        w.writerows(group_rows)


if __name__ == "__main__":
    main()
