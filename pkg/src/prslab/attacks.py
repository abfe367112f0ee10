"""Untargeted L-inf sign-gradient attacks (FGSM, BIM, PGD) and their evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .nn import Model

ZERO_GRAD_THRESHOLD = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"  # fgsm | bim | pgd
    epsilon: float = 0.1
    step_size: float | None = None  # None -> epsilon / 10 (epsilon for fgsm)
    num_steps: int = 20
    random_start: bool | None = None  # None -> True for pgd, False for bim/fgsm
    clip_min: float = 0.0
    clip_max: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in ("fgsm", "bim", "pgd"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.method == "fgsm" and self.num_steps != 1:
            object.__setattr__(self, "num_steps", 1)
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.method != "fgsm" and not 0 <= self.alpha <= self.epsilon + 1e-12:
            raise ValueError(f"step size {self.alpha} must lie in [0, epsilon={self.epsilon}]")

    @property
    def alpha(self) -> float:
        if self.method == "fgsm":
            return self.epsilon
        return self.epsilon / 10 if self.step_size is None else self.step_size

    @property
    def uses_random_start(self) -> bool:
        if self.random_start is None:
            return self.method == "pgd"
        return self.random_start

    @property
    def label(self) -> str:
        if self.method == "fgsm":
            return "FGSM"
        return f"{self.method.upper()}-{self.num_steps}"


def fixed_step_config(method: str, epsilon: float, seed: int = 0) -> AttackConfig:
    """FGSM, BIM-5, PGD-20 or PGD-100 with step 2/255 (capped at epsilon)."""
    steps = {"fgsm": 1, "bim": 5, "pgd": 20, "pgd20": 20, "pgd100": 100}[method]
    name = "pgd" if method.startswith("pgd") else method
    return AttackConfig(name, epsilon, step_size=min(2 / 255, epsilon), num_steps=steps, seed=seed)


@dataclass
class AttackOutcome:
    """Batched attack result; row i belongs to input i."""

    x_adv: np.ndarray
    success: np.ndarray  # prediction on x_adv differs from the label
    clean_logits: np.ndarray
    adv_logits: np.ndarray
    grad_norm: np.ndarray  # L-inf norm of the input gradient at the clean point
    labels: np.ndarray
    loss_trace: list = field(default_factory=list)  # per-step summed loss

    @property
    def clean_correct(self) -> np.ndarray:
        return self.clean_logits.argmax(axis=1) == self.labels


def input_gradient(model: Model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """(d sum_i CE_i / dx, logits, summed loss) with parameters held constant."""
    xt = ad.Tensor(np.asarray(x, dtype=model.dtype), requires_grad=True)
    logits = model(xt, track_params=False)
    loss = ad.softmax_cross_entropy(logits, y, reduction="sum")
    ad.backward(loss)
    return xt.grad, logits.data, float(loss.data)


def _batches(n, batch_size):
    for s in range(0, n, batch_size):
        yield slice(s, min(n, s + batch_size))


def fgsm(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig) -> AttackOutcome:
    x = np.asarray(x, dtype=model.dtype)
    g, clean_logits, _ = input_gradient(model, x, y)
    x_adv = np.clip(x + config.epsilon * np.sign(g), config.clip_min, config.clip_max).astype(x.dtype)
    return _outcome(model, x_adv, y, clean_logits, g, [])


def _random_start(x: np.ndarray, eps: float, seed: int, indices) -> np.ndarray:
    # one stream per (seed, sample index) so batching does not change the noise
    noise = np.stack([
        np.random.default_rng([seed, int(i)]).uniform(-eps, eps, size=x.shape[1:]) for i in indices
    ]).astype(x.dtype)
    return noise


def pgd(model: Model, x: np.ndarray, y: np.ndarray, config: AttackConfig, indices=None,
        trace: bool = False) -> AttackOutcome:
    """Iterated sign-gradient ascent projected onto the eps-ball and the clip box.

    BIM is the same loop without the random start.
    """
    x0 = np.asarray(x, dtype=model.dtype)
    eps, alpha = config.epsilon, config.alpha
    lo = np.maximum(x0 - eps, config.clip_min)
    hi = np.minimum(x0 + eps, config.clip_max)
    g0, clean_logits, _ = input_gradient(model, x0, y)
    if config.uses_random_start and eps > 0:
        idx = np.arange(len(x0)) if indices is None else indices
        xk = np.clip(x0 + _random_start(x0, eps, config.seed, idx), lo, hi)
        g = None
    else:
        xk, g = x0, g0
    losses = []
    for _ in range(config.num_steps):
        if g is None:
            g, _, loss = input_gradient(model, xk, y)
            if trace:
                losses.append(loss)
        step = np.clip(xk + alpha * np.sign(g), config.clip_min, config.clip_max)
        xk = np.clip(step, x0 - eps, x0 + eps).astype(x0.dtype)
        g = None
    return _outcome(model, xk, y, clean_logits, g0, losses)


def bim(model: Model, x, y, config: AttackConfig, **kw) -> AttackOutcome:
    return pgd(model, x, y, replace(config, method="bim", random_start=False), **kw)


def _outcome(model, x_adv, y, clean_logits, g, trace) -> AttackOutcome:
    adv_logits = model.logits_numpy(x_adv)
    return AttackOutcome(
        x_adv=x_adv,
        success=adv_logits.argmax(axis=1) != np.asarray(y),
        clean_logits=clean_logits,
        adv_logits=adv_logits,
        grad_norm=np.abs(g.reshape(len(g), -1)).max(axis=1),
        labels=np.asarray(y),
        loss_trace=trace,
    )


def attack(model: Model, x, y, config: AttackConfig, indices=None) -> AttackOutcome:
    if config.method == "fgsm":
        return fgsm(model, x, y, config)
    return pgd(model, x, y, config, indices=indices)


def run_attack(model: Model, dataset: Dataset, config: AttackConfig, batch_size: int = 500) -> AttackOutcome:
    """Attack a whole dataset in batches; results are independent of batch_size."""
    parts = []
    for sl in _batches(len(dataset), batch_size):
        idx = np.arange(sl.start, sl.stop)
        parts.append(attack(model, dataset.inputs[sl], dataset.labels[sl], config, indices=idx))
    if not parts:
        raise ValueError("empty dataset")
    return AttackOutcome(
        x_adv=np.concatenate([p.x_adv for p in parts]),
        success=np.concatenate([p.success for p in parts]),
        clean_logits=np.concatenate([p.clean_logits for p in parts]),
        adv_logits=np.concatenate([p.adv_logits for p in parts]),
        grad_norm=np.concatenate([p.grad_norm for p in parts]),
        labels=dataset.labels,
    )


def robust_accuracy(model: Model, dataset: Dataset, config: AttackConfig, count_all: bool = True,
                    outcome: AttackOutcome | None = None) -> float:
    """Fraction still classified correctly after the attack.

    ``count_all=False`` restricts the denominator to clean-correct samples.
    """
    if len(dataset) == 0:
        return 0.0
    outcome = outcome or run_attack(model, dataset, config)
    ok = ~outcome.success
    if count_all:
        return float(ok.mean())
    clean = outcome.clean_correct
    return float(ok[clean].mean()) if clean.any() else 0.0


@dataclass
class ForensicsReport:
    success_ratio: float
    failed_nonzero_grad_ratio: float
    failed_zero_grad_ratio: float
    failed_indices: np.ndarray
    failed_clean_logits: np.ndarray
    failed_adv_logits: np.ndarray

    def as_dict(self) -> dict:
        return {
            "success_ratio": self.success_ratio,
            "failed_nonzero_grad_ratio": self.failed_nonzero_grad_ratio,
            "failed_zero_grad_ratio": self.failed_zero_grad_ratio,
            "num_failed": int(len(self.failed_indices)),
        }


def failure_forensics(model: Model, dataset: Dataset, config: AttackConfig,
                      outcome: AttackOutcome | None = None) -> ForensicsReport:
    outcome = outcome or run_attack(model, dataset, config)
    n = len(outcome.success)
    zero = outcome.grad_norm < ZERO_GRAD_THRESHOLD
    failed = ~outcome.success
    fi = np.flatnonzero(failed)
    return ForensicsReport(
        success_ratio=float(outcome.success.sum() / n),
        failed_nonzero_grad_ratio=float((failed & ~zero).sum() / n),
        failed_zero_grad_ratio=float((failed & zero).sum() / n),
        failed_indices=fi,
        failed_clean_logits=outcome.clean_logits[fi],
        failed_adv_logits=outcome.adv_logits[fi],
    )


def write_outcome_csv(outcome: AttackOutcome, x_clean: np.ndarray, path):
    """One row per sample: index, success, L-inf budget used, gradient norm, clean/adv logits."""
    n, c = outcome.clean_logits.shape
    used = np.abs((outcome.x_adv - x_clean).reshape(n, -1)).max(axis=1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "success", "budget_used", "grad_norm"]
                   + [f"clean_logit_{k}" for k in range(c)] + [f"adv_logit_{k}" for k in range(c)])
        for i in range(n):
            w.writerow([i, int(outcome.success[i]), f"{used[i]:.8g}", f"{outcome.grad_norm[i]:.8g}"]
                       + [f"{v:.6g}" for v in outcome.clean_logits[i]]
                       + [f"{v:.6g}" for v in outcome.adv_logits[i]])
