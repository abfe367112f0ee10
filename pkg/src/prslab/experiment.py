"""Config-driven experiment runs: validation, run directories, reports.

A config is a JSON object::

    {
      "name": "quickstart-blobs",
      "seed": 0,
      "dataset": {"kind": "blobs" | "idx" | "cifar10" | "mnist5k", ...},
      "model": {"preset": "mlp2" | "cnn4" | "mlp", ...} or {"layers": [...]},
      "train": {TrainConfig fields},
      "attacks": {"methods": ["fgsm", "bim", "pgd20"], "epsilons": [0.1]},
      "analysis": {"prs_profile": true, "inclusion": true, "cosine": true,
                   "major_regions": true, "slice_anchors": [0, 1, 2]},
      "sweep": {"seeds": [0, 1], "batch_sizes": [64, 512], "harvest_every": 1}
    }

Everything is validated before any compute; errors name the offending field.
"""

from __future__ import annotations

import copy
import csv
import json
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import data as D
from .attacks import AttackConfig, failure_forensics, fixed_step_config, run_attack, write_outcome_csv
from .nn import LayerSpec, Model, cnn4, load_checkpoint, mlp, mlp2, save_checkpoint
from .regions import (build_prs, inclusion_split, major_regions, plane_slice_region_map, prs_depth_profile,
                      write_depth_profile, write_major_regions)
from .stats import (DegenerateRegressionError, cosine_similarity_matrix, mean_offdiag_similarity,
                    ols_regression, write_cosine_matrix)
from .training import TrainConfig, accuracy, train

RECIPES = ("quickstart-blobs", "mnist-desk-standard", "mnist-desk-prs", "mnist-batchsize-sweep")


class ConfigError(ValueError):
    """Invalid experiment config; ``path`` names the field."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


# -- config ---------------------------------------------------------------------

def load_config(ref: str) -> dict:
    """Read a config from a path, or a shipped recipe by name."""
    p = Path(ref)
    if p.is_dir() and (p / "config.json").exists():
        p = p / "config.json"
    if p.exists():
        try:
            return json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("<config>", f"not valid JSON ({e})") from None
    name = ref.removeprefix("recipe:")
    if name in RECIPES:
        return json.loads(resources.files("prslab.recipes").joinpath(f"{name}.json").read_text())
    raise ConfigError("<config>", f"no such file or recipe: {ref}")


def _req(d: dict, key: str, path: str, types=None):
    if key not in d:
        raise ConfigError(f"{path}.{key}", "missing")
    v = d[key]
    if types is not None and not isinstance(v, types):
        raise ConfigError(f"{path}.{key}", f"expected {types}, got {type(v).__name__}")
    return v


def validate_config(cfg: dict, check_paths: bool = True) -> dict:
    if not isinstance(cfg, dict):
        raise ConfigError("<config>", "top level must be an object")
    cfg = copy.deepcopy(cfg)
    known = {"name", "seed", "dataset", "model", "train", "attacks", "analysis", "sweep", "precision", "out"}
    for k in cfg:
        if k not in known:
            raise ConfigError(k, "unknown field")
    cfg.setdefault("name", "experiment")
    cfg.setdefault("seed", 0)
    if not isinstance(cfg["seed"], int):
        raise ConfigError("seed", "must be an integer")

    ds = _req(cfg, "dataset", "<config>", dict)
    kind = _req(ds, "kind", "dataset", str)
    if kind == "blobs":
        for k in ("num_classes", "per_class", "dims"):
            v = _req(ds, k, "dataset", int)
            if v <= 0:
                raise ConfigError(f"dataset.{k}", "must be positive")
        ds.setdefault("spread", 0.05)
        ds.setdefault("test_per_class", ds["per_class"])
    elif kind == "idx":
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            v = _req(ds, k, "dataset", str)
            if check_paths and not Path(v).exists():
                raise ConfigError(f"dataset.{k}", f"path does not exist: {v}")
    elif kind == "cifar10":
        for k in ("train_batches", "test_batches"):
            v = _req(ds, k, "dataset", list)
            for i, pth in enumerate(v):
                if check_paths and not Path(pth).exists():
                    raise ConfigError(f"dataset.{k}[{i}]", f"path does not exist: {pth}")
    elif kind == "mnist5k":
        ds.setdefault("root", "data/mnist5k")
    else:
        raise ConfigError("dataset.kind", f"unknown dataset kind {kind!r}")
    if "subset" in ds and (not isinstance(ds["subset"], int) or ds["subset"] <= 0):
        raise ConfigError("dataset.subset", "must be a positive integer")

    model = cfg.setdefault("model", {"preset": "mlp2"})
    if "layers" in model:
        for i, spec in enumerate(model["layers"]):
            try:
                LayerSpec.from_dict(spec)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"model.layers[{i}]", str(e)) from None
    else:
        preset = model.setdefault("preset", "mlp2")
        if preset not in ("mlp2", "cnn4", "mlp"):
            raise ConfigError("model.preset", f"unknown preset {preset!r}")
        if preset == "mlp":
            h = _req(model, "hidden", "model", list)
            if not h or not all(isinstance(v, int) and v > 0 for v in h):
                raise ConfigError("model.hidden", "must be a nonempty list of positive integers")
    prec = cfg.setdefault("precision", "float32")
    if prec not in ("float32", "float64"):
        raise ConfigError("precision", "must be float32 or float64")

    tr = cfg.setdefault("train", {})
    try:
        TrainConfig(**{**tr, "seed": cfg["seed"]})
    except TypeError as e:
        raise ConfigError("train", str(e)) from None
    except ValueError as e:
        raise ConfigError("train", str(e)) from None

    at = cfg.setdefault("attacks", {"methods": [], "epsilons": []})
    methods = _req(at, "methods", "attacks", list)
    eps = _req(at, "epsilons", "attacks", list)
    for i, m in enumerate(methods):
        if m not in ("fgsm", "bim", "pgd", "pgd20", "pgd100"):
            raise ConfigError(f"attacks.methods[{i}]", f"unknown attack {m!r}")
    for i, e in enumerate(eps):
        if not isinstance(e, (int, float)) or e < 0:
            raise ConfigError(f"attacks.epsilons[{i}]", "must be a non-negative number")
    step = at.get("step_size")
    if step is not None and step != "fixed" and (isinstance(step, bool) or not isinstance(step, (int, float))
                                                 or step <= 0):
        raise ConfigError("attacks.step_size", "must be null, a positive number, or \"fixed\"")

    an = cfg.setdefault("analysis", {})
    anchors = an.get("slice_anchors")
    if anchors is not None and (not isinstance(anchors, list) or len(anchors) < 3):
        raise ConfigError("analysis.slice_anchors", "need three anchor indices")

    sw = cfg.get("sweep")
    if sw is not None:
        for k in ("seeds", "batch_sizes"):
            v = _req(sw, k, "sweep", list)
            if not v or not all(isinstance(x, int) and x > 0 or (k == "seeds" and x == 0) for x in v):
                raise ConfigError(f"sweep.{k}", "must be a nonempty list of integers")
        sw.setdefault("harvest_every", 0)
    return cfg


def attack_configs(cfg: dict) -> list[AttackConfig]:
    """Expand the attack grid; step size comes from ``attacks.step_size`` or defaults to eps/10.

    ``"fixed"`` selects a 2/255 step for every attack (capped at epsilon).
    """
    at = cfg.get("attacks", {})
    step = at.get("step_size")
    out = []
    for m in at.get("methods", []):
        for e in at.get("epsilons", []):
            if step == "fixed":
                out.append(fixed_step_config(m, e, seed=cfg["seed"]))
                continue
            steps = {"fgsm": 1, "bim": 5, "pgd": 20, "pgd20": 20, "pgd100": 100}[m]
            name = "pgd" if m.startswith("pgd") else m
            s = None if step is None else min(step, e)
            out.append(AttackConfig(name, float(e), step_size=s, num_steps=steps, seed=cfg["seed"]))
    return out


# -- building blocks --------------------------------------------------------------

def load_datasets(cfg: dict) -> tuple[D.Dataset, D.Dataset]:
    ds = cfg["dataset"]
    kind = ds["kind"]
    try:
        if kind == "blobs":
            means = D.blob_means(ds["num_classes"], ds["dims"], cfg["seed"])
            train = D.make_blobs(ds["num_classes"], ds["per_class"], ds["dims"], ds["spread"],
                                 seed=cfg["seed"], means=means)
            test = D.make_blobs(ds["num_classes"], ds["test_per_class"], ds["dims"], ds["spread"],
                                seed=cfg["seed"] + 10_007, split="test", means=means)
        elif kind == "idx":
            train = D.load_idx(ds["train_images"], ds["train_labels"], name=ds.get("name", "mnist"))
            test = D.load_idx(ds["test_images"], ds["test_labels"], name=ds.get("name", "mnist"), split="test")
        elif kind == "cifar10":
            train = D.load_cifar10(ds["train_batches"])
            test = D.load_cifar10(ds["test_batches"], split="test")
        else:
            paths = D.prepare_mnist5k(ds["root"])
            train = D.load_idx(paths["train_images"], paths["train_labels"], name="mnist5k")
            test = D.load_idx(paths["test_images"], paths["test_labels"], name="mnist5k", split="test")
    except FileNotFoundError as e:
        raise ConfigError(f"dataset.{kind}", str(e)) from None
    if "subset" in ds:
        train = D.subset(train, ds["subset"], seed=cfg["seed"], stratified=ds.get("stratified", False))
    if "test_subset" in ds:
        test = D.subset(test, ds["test_subset"], seed=cfg["seed"], stratified=ds.get("stratified", False))
    return train, test


def layer_specs(cfg: dict, num_classes: int) -> list[LayerSpec]:
    m = cfg["model"]
    if "layers" in m:
        return [LayerSpec.from_dict(s) for s in m["layers"]]
    if m["preset"] == "mlp2":
        return mlp2(num_classes, m.get("width", 256))
    if m["preset"] == "cnn4":
        return cnn4(num_classes)
    return mlp(m["hidden"], num_classes)


def build_model(cfg: dict, train: D.Dataset, seed: int | None = None) -> Model:
    dtype = np.float64 if cfg.get("precision") == "float64" else np.float32
    return Model(layer_specs(cfg, train.num_classes), train.input_shape,
                 seed=cfg["seed"] if seed is None else seed, dtype=dtype)


def train_config(cfg: dict, seed: int | None = None, batch_size: int | None = None) -> TrainConfig:
    tr = dict(cfg["train"])
    tr["seed"] = cfg["seed"] if seed is None else seed
    if batch_size is not None:
        tr["batch_size"] = batch_size
    return TrainConfig(**tr)


# -- reports ------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    name: str
    seed: int
    batch_size: int
    epoch: int
    train_accuracy: float
    test_accuracy: float
    prs_ratio: float
    inclusion_ratio: float
    mean_cosine_similarity: float
    robust_accuracy: dict = field(default_factory=dict)  # "PGD-20@0.1" -> value
    checkpoint: str = ""
    train_log: str = ""

    @property
    def primary_robust_accuracy(self) -> float | None:
        return next(iter(self.robust_accuracy.values()), None)

    def save(self, run_dir):
        run_dir = Path(run_dir)
        (run_dir / "report.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True))
        with open(run_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            for k in ("train_accuracy", "test_accuracy", "prs_ratio", "inclusion_ratio",
                      "mean_cosine_similarity"):
                w.writerow([k, f"{getattr(self, k):.6f}"])
            for k, v in self.robust_accuracy.items():
                w.writerow([f"robust_accuracy[{k}]", f"{v:.6f}"])

    @classmethod
    def load(cls, path) -> "ExperimentReport":
        p = Path(path)
        if p.is_dir():
            p = p / "report.json"
        return cls(**json.loads(p.read_text()))


def evaluate(model: Model, train: D.Dataset, test: D.Dataset, attacks: list[AttackConfig],
             name: str = "", seed: int = 0, batch_size: int = 0, epoch: int = 0,
             layer: int | None = None) -> ExperimentReport:
    layer = layer or model.penultimate_index
    rs = build_prs(model, train, layer)
    _, _, inc = inclusion_split(model, rs, test, layer)
    robust = {}
    for a in attacks:
        out = run_attack(model, test, a)
        robust[f"{a.label}@{a.epsilon:g}"] = float((~out.success).mean())
    return ExperimentReport(
        name=name, seed=seed, batch_size=batch_size, epoch=epoch,
        train_accuracy=accuracy(model, train), test_accuracy=accuracy(model, test),
        prs_ratio=len(rs) / len(train), inclusion_ratio=inc,
        mean_cosine_similarity=mean_offdiag_similarity(cosine_similarity_matrix(model)),
        robust_accuracy=robust,
    )


# -- commands --------------------------------------------------------------------------

def run_train(cfg: dict, out_dir, log=print) -> list[ExperimentReport]:
    """Train (or sweep) per config; returns the reports written."""
    cfg = validate_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True))
    train_ds, test_ds = load_datasets(cfg)
    attacks = attack_configs(cfg)
    sweep = cfg.get("sweep")
    combos = [(cfg["seed"], cfg["train"].get("batch_size", 64), out)]
    if sweep:
        combos = [(s, b, out / f"seed{s}_bs{b}") for s in sweep["seeds"] for b in sweep["batch_sizes"]]
    reports = []
    for seed, bs, run_dir in combos:
        run_dir.mkdir(parents=True, exist_ok=True)
        tc = train_config(cfg, seed=seed, batch_size=bs)
        model = build_model(cfg, train_ds, seed=seed)
        harvest = sweep.get("harvest_every", 0) if sweep else 0

        def on_epoch(epoch, m, tlog, run_dir=run_dir, seed=seed, bs=bs):
            if harvest and epoch % harvest == 0:
                hd = run_dir / f"epoch{epoch:03d}"
                hd.mkdir(exist_ok=True)
                ck = save_checkpoint(m, hd / "model.ckpt", epoch)
                rep = evaluate(m, train_ds, test_ds, attacks, cfg["name"], seed, bs, epoch, tc.layer)
                rep.checkpoint = str(Path(ck).relative_to(run_dir))
                rep.save(hd)
                reports.append(rep)
                log(f"harvest seed={seed} bs={bs} epoch={epoch} prs={rep.prs_ratio:.4f} "
                    f"robust={rep.primary_robust_accuracy}")

        t0 = time.perf_counter()
        model, tlog = train(model, train_ds, tc, test_dataset=test_ds,
                            checkpoint_dir=run_dir / "checkpoints", on_epoch=on_epoch)
        tlog.to_csv(run_dir / "train_log.csv")
        if not harvest:
            rep = evaluate(model, train_ds, test_ds, attacks, cfg["name"], seed, bs, tc.epochs, tc.layer)
            rep.checkpoint = str(Path(tlog.checkpoints["final"]).relative_to(run_dir))
            rep.train_log = "train_log.csv"
            rep.save(run_dir)
            reports.append(rep)
        log(f"trained seed={seed} bs={bs} in {time.perf_counter() - t0:.1f}s; "
            f"test acc {tlog.last().test_acc:.4f}")
    return reports


def run_attack_cmd(model: Model, cfg: dict, out_dir, log=print) -> list[dict]:
    cfg = validate_config(cfg)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _, test = load_datasets(cfg)
    rows = []
    for a in attack_configs(cfg):
        t0 = time.perf_counter()
        res = run_attack(model, test, a)
        f = failure_forensics(model, test, a, outcome=res)
        tag = f"{a.label}_eps{a.epsilon:g}"
        write_outcome_csv(res, test.inputs, out / f"attack_{tag}.csv")
        rows.append({
            "attack": a.label, "epsilon": a.epsilon, "step_size": a.alpha,
            "robust_accuracy": float((~res.success).mean()),
            "clean_accuracy": float(res.clean_correct.mean()),
            "success_ratio": f.success_ratio,
            "failed_nonzero_grad_ratio": f.failed_nonzero_grad_ratio,
            "failed_zero_grad_ratio": f.failed_zero_grad_ratio,
            "seconds": time.perf_counter() - t0,
        })
        log(f"{a.label} eps={a.epsilon:g}: robust {rows[-1]['robust_accuracy']:.4f}")
    with open(out / "robust_accuracy.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = ["attack", "epsilon", "step_size", "robust_accuracy", "clean_accuracy", "success_ratio",
                "failed_nonzero_grad_ratio", "failed_zero_grad_ratio", "seconds"]
        w.writerow(cols)
        for r in rows:
            w.writerow([r["attack"], f"{r['epsilon']:g}", f"{r['step_size']:.6g}"]
                       + [f"{r[c]:.6f}" for c in cols[3:-1]] + [f"{r['seconds']:.3f}"])
    return rows


def run_analyze(model: Model, cfg: dict, out_dir, log=print) -> dict:
    cfg = validate_config(cfg)
    an = cfg.get("analysis", {})
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_ds, test_ds = load_datasets(cfg)
    layer = cfg["train"].get("layer") or model.penultimate_index
    summary: dict = {"layer": layer}

    rs = build_prs(model, train_ds, layer)
    summary["prs"] = rs.summary()
    if an.get("prs_profile", True):
        write_depth_profile(prs_depth_profile(model, train_ds), len(train_ds), out / "depth_profile.csv")
    if an.get("inclusion", True):
        inc, exc, ratio = inclusion_split(model, rs, test_ds, layer)
        summary["inclusion_ratio"] = ratio
        with open(out / "inclusion.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "label", "included"])
            member = np.zeros(len(test_ds), dtype=int)
            member[inc] = 1
            for i in range(len(test_ds)):
                w.writerow([i, int(test_ds.labels[i]), member[i]])
    if an.get("major_regions", True):
        table = major_regions(rs, model, train_ds, layer)
        write_major_regions(table, rs, out / "major_regions.csv")
    if an.get("cosine", True):
        cm = cosine_similarity_matrix(model)
        write_cosine_matrix(cm, out / "cosine_matrix.csv")
        summary["mean_cosine_similarity"] = mean_offdiag_similarity(cm)
    anchors = an.get("slice_anchors")
    if anchors is not None:
        if len(anchors) < 3:
            raise ConfigError("analysis.slice_anchors", "need three anchor indices")
        pts = [train_ds.inputs[i] for i in anchors[:3]]
        grid = tuple(an.get("slice_grid", [100, 100]))
        sm = plane_slice_region_map(model, pts, grid=grid, l=layer)
        sm.to_csv(out / "slice_map.csv")
        summary["slice"] = {"anchors": anchors[:3], "num_regions": len(sm.patterns),
                            "anchor_cells": [list(c) for c in sm.anchor_cells()]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    log(f"layer {layer}: {len(rs)} regions / {len(train_ds)} samples")
    return summary


REGRESS_PAIRS = (
    ("robust_accuracy", lambda r: r.primary_robust_accuracy),
    ("mean_cosine_similarity", lambda r: r.mean_cosine_similarity),
    ("inclusion_ratio", lambda r: r.inclusion_ratio),
)
REGRESS_HEADER = ["property", "coef", "p_value", "intercept", "r2", "n"]


def collect_reports(paths) -> list[ExperimentReport]:
    reports = []
    for p in paths:
        p = Path(p)
        if p.is_file():
            reports.append(ExperimentReport.load(p))
        else:
            reports.extend(ExperimentReport.load(q) for q in sorted(p.rglob("report.json")))
    return reports


def run_regress(reports: list[ExperimentReport], out_dir) -> dict:
    """OLS of PRS ratio against each property; Table-1 style output."""
    if len(reports) < 3:
        raise DegenerateRegressionError(f"need at least 3 reports, got {len(reports)}")
    x = np.array([r.prs_ratio for r in reports])
    if np.ptp(x) == 0:
        raise DegenerateRegressionError("PRS ratio is constant across reports")
    results = {}
    for name, get in REGRESS_PAIRS:
        y = [get(r) for r in reports]
        if any(v is None for v in y):
            continue
        results[name] = ols_regression(x, y)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "regression.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REGRESS_HEADER)
        for name, r in results.items():
            w.writerow([name, f"{r.slope:.6g}", f"{r.p_value:.6g}", f"{r.intercept:.6g}", f"{r.r2:.6f}", r.n])
    lines = [f"{'Property':<24}{'Coef':>12}{'P-val':>12}", "-" * 48]
    lines += [f"{name:<24}{r.slope:>12.4g}{r.p_value:>12.3E}" for name, r in results.items()]
    (out / "regression.txt").write_text("\n".join(lines) + "\n")
    return results
