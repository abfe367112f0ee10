"""Standard, adversarial and region-regularised training.

The region-regularised schemes (``mr`` and ``prs``) warm up with plain
cross-entropy, then build the per-class major-region mean vectors on the
training set, freeze the logit layer, and continue with

    lam1 * CE + lam2 * mean_i ||mrv[y_i] - f(x_i)||^2 + lam3 * hamming_term

where ``f`` is the pre-activation output of the analysis layer. The Hamming
term is reported exactly but trained through a hinge surrogate, since the
exact count has zero gradient almost everywhere.
"""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, attack
from .autodiff import ContractError, Tensor
from .data import BatchIterator, Dataset
from .nn import Adam, Model, save_checkpoint
from .regions import MajorRegionTable, build_prs, major_regions

SCHEMES = ("standard", "adversarial", "mr", "prs")


@dataclass
class TrainConfig:
    scheme: str = "standard"
    epochs: int = 25
    warmup_epochs: int = 5
    batch_size: int = 64
    lr: float = 1e-3
    lam1: float = 0.2
    lam2: float = 0.8
    lam3: float = 1.0
    layer: int | None = None  # None -> penultimate
    mrv_refresh_period: int = 0
    attack: AttackConfig = field(default_factory=lambda: AttackConfig("pgd", 0.1, num_steps=20))
    seed: int = 0
    prs_every: int = 1  # measure PRS ratio every k epochs (0 = never)

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if isinstance(self.attack, dict):
            self.attack = AttackConfig(**self.attack)
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.scheme == "mr":
            self.lam3 = 0.0
        if self.scheme in ("mr", "prs") and not 0 < self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie strictly between 0 and epochs")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack"] = asdict(self.attack)
        return d


# -- losses -------------------------------------------------------------------

def _mrv_targets(labels: np.ndarray, mrv_table: MajorRegionTable, dtype) -> np.ndarray:
    missing = set(np.unique(labels).tolist()) - set(mrv_table.regions)
    if missing:
        raise ContractError(f"no MRV for classes {sorted(missing)}")
    return np.stack([mrv_table.regions[int(y)].mrv for y in labels]).astype(dtype)


def _flat(features):
    if isinstance(features, Tensor):
        return ad.flatten(features) if features.ndim > 2 else features
    f = np.asarray(features)
    return Tensor(f.reshape(len(f), -1))


def loss_mrv(features, labels, mrv_table: MajorRegionTable) -> Tensor:
    """Mean over the batch of the squared distance to the sample's class MRV."""
    f = _flat(features)
    target = _mrv_targets(np.asarray(labels), mrv_table, f.dtype)
    diff = ad.sub(f, target)
    return ad.mul(ad.tsum(ad.square(diff)), 1.0 / f.shape[0])


def loss_ham(features, labels, mrv_table: MajorRegionTable, mode: str = "surrogate") -> Tensor:
    """Fraction of coordinates whose sign disagrees with the class MRV's sign.

    ``exact`` counts mismatches (sign(0) taken as -1); ``surrogate`` is the
    hinge mean(max(0, -s * f)) with s = +/-1 the MRV sign, zero exactly when
    all signs agree on features without exact zeros.
    """
    f = _flat(features)
    n, d = f.shape
    target = _mrv_targets(np.asarray(labels), mrv_table, f.dtype)
    s = np.where(target > 0, 1.0, -1.0).astype(f.dtype)
    if mode == "exact":
        mismatch = (f.data > 0) != (s > 0)
        return Tensor(np.asarray(mismatch.sum() / (n * d), dtype=f.dtype))
    if mode != "surrogate":
        raise ValueError(f"unknown mode {mode!r}")
    return ad.mul(ad.tsum(ad.relu(ad.mul(f, -s))), 1.0 / (n * d))


def loss_prs(logits, features, labels, mrv_table, lam1=0.2, lam2=0.8, lam3=1.0) -> tuple[Tensor, dict]:
    """Weighted sum of CE, MRV distance and surrogate Hamming; returns (loss, components)."""
    ce = ad.softmax_cross_entropy(logits, labels)
    total = ad.mul(ce, lam1)
    comps = {"ce": float(ce.data)}
    if lam2:
        lm = loss_mrv(features, labels, mrv_table)
        total = ad.add(total, ad.mul(lm, lam2))
        comps["mrv"] = float(lm.data)
    if lam3:
        lh = loss_ham(features, labels, mrv_table, "surrogate")
        total = ad.add(total, ad.mul(lh, lam3))
        comps["ham_surrogate"] = float(lh.data)
    comps["ham_exact"] = float(loss_ham(features, labels, mrv_table, "exact").data)
    comps["total"] = float(total.data)
    return total, comps


# -- logs ---------------------------------------------------------------------

LOG_FIELDS = ["epoch", "phase", "train_acc", "test_acc", "prs_ratio", "loss_total", "loss_ce",
              "loss_mrv", "loss_ham_surrogate", "loss_ham_exact", "seconds"]


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # warmup | regularized | standard | adversarial
    train_acc: float
    test_acc: float | None
    prs_ratio: float | None
    loss_total: float
    loss_ce: float
    loss_mrv: float | None = None
    loss_ham_surrogate: float | None = None
    loss_ham_exact: float | None = None
    seconds: float = 0.0


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    mrv_table: MajorRegionTable | None = None
    checkpoints: dict = field(default_factory=dict)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        self.records.append(rec)

    def last(self) -> EpochRecord:
        return self.records[-1]

    def to_csv(self, path, include_time: bool = True):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOG_FIELDS if include_time else LOG_FIELDS[:-1])
            for r in self.records:
                row = [r.epoch, r.phase] + [_fmt(getattr(r, k)) for k in LOG_FIELDS[2:-1]]
                if include_time:
                    row.append(f"{r.seconds:.3f}")
                w.writerow(row)


def _fmt(v):
    return "" if v is None else f"{v:.6f}"


def accuracy(model: Model, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return 0.0
    return float((model.predict(dataset.inputs) == dataset.labels).mean())


# -- training loop ------------------------------------------------------------

def build_mrv_table(model: Model, dataset: Dataset, layer: int) -> MajorRegionTable:
    rs = build_prs(model, dataset, layer)
    return major_regions(rs, model, dataset, layer)


def train(model: Model, dataset: Dataset, config: TrainConfig, test_dataset: Dataset | None = None,
          checkpoint_dir=None, on_epoch=None) -> tuple[Model, TrainLog]:
    """Train ``model`` in place; returns it with the per-epoch log.

    ``on_epoch(epoch, model, log)`` is called after every epoch (used for
    checkpoint harvesting). Checkpoints go to ``checkpoint_dir`` at the end
    of warm-up and after the final epoch.
    """
    layer = config.layer or model.penultimate_index
    opt = Adam(lr=config.lr)
    it = BatchIterator(dataset, config.batch_size, seed=config.seed)
    log = TrainLog()
    mrv_table = None
    regularized = config.scheme in ("mr", "prs")
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        in_reg = regularized and epoch > config.warmup_epochs
        sums: dict = {}
        nb = 0
        attack_cfg = replace(config.attack, seed=config.attack.seed * 100_003 + epoch)
        for xb, yb, idx in it:
            if config.scheme == "adversarial":
                xb = attack(model, xb, yb, attack_cfg, indices=idx).x_adv
            if in_reg:
                feats = model.forward_all(Tensor(xb), track_params=True)
                loss, comps = loss_prs(feats[-1], feats[layer - 1], yb, mrv_table,
                                       config.lam1, config.lam2, config.lam3)
            else:
                logits = model(Tensor(xb))
                loss = ad.softmax_cross_entropy(logits, yb)
                comps = {"ce": float(loss.data), "total": float(loss.data)}
            ad.backward(loss)
            opt.step(model)
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v
            nb += 1
        seconds = time.perf_counter() - t0
        mean = {k: v / nb for k, v in sums.items()}

        prs = None
        if config.prs_every and (epoch % config.prs_every == 0 or epoch == config.epochs):
            prs = len(build_prs(model, dataset, layer)) / len(dataset)
        phase = config.scheme if not regularized else ("regularized" if in_reg else "warmup")
        log.append(EpochRecord(
            epoch=epoch, phase=phase,
            train_acc=accuracy(model, dataset),
            test_acc=accuracy(model, test_dataset) if test_dataset is not None else None,
            prs_ratio=prs,
            loss_total=mean["total"], loss_ce=mean["ce"],
            loss_mrv=mean.get("mrv"), loss_ham_surrogate=mean.get("ham_surrogate"),
            loss_ham_exact=mean.get("ham_exact"),
            seconds=seconds,
        ))

        if regularized and epoch == config.warmup_epochs:
            mrv_table = build_mrv_table(model, dataset, layer)
            log.mrv_table = mrv_table
            model.freeze_final_layer()
            if ckdir is not None:
                log.checkpoints["warmup"] = str(save_checkpoint(model, ckdir / "warmup.ckpt", epoch))
        elif in_reg and config.mrv_refresh_period and epoch < config.epochs \
                and (epoch - config.warmup_epochs) % config.mrv_refresh_period == 0:
            mrv_table = build_mrv_table(model, dataset, layer)
            log.mrv_table = mrv_table
        if on_epoch is not None:
            on_epoch(epoch, model, log)

    if ckdir is not None:
        log.checkpoints["final"] = str(save_checkpoint(model, ckdir / "final.ckpt", config.epochs))
    return model, log
