"""Final-layer cosine similarity, simple OLS with a t-test, and robustness group analyses."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, attack, run_attack
from .data import Dataset
from .nn import Model
from .regions import MajorRegionTable


class DegenerateRegressionError(ValueError):
    pass


# -- cosine similarity --------------------------------------------------------

def cosine_matrix(rows: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity of row vectors; zero-norm rows score 0 against everything."""
    w = np.asarray(rows, dtype=np.float64)
    norms = np.linalg.norm(w, axis=1)
    ok = norms > 0
    u = np.zeros_like(w)
    u[ok] = w[ok] / norms[ok, None]
    m = np.clip(u @ u.T, -1.0, 1.0)
    m = (m + m.T) / 2
    idx = np.flatnonzero(ok)
    m[idx, idx] = 1.0
    return m


def cosine_similarity_matrix(model: Model) -> np.ndarray:
    return cosine_matrix(model.final_weight())


def mean_offdiag_similarity(matrix: np.ndarray) -> float:
    m = np.asarray(matrix, dtype=np.float64)
    c = len(m)
    if c < 2:
        raise ValueError("need at least two classes")
    return float((m.sum() - np.trace(m)) / (c * (c - 1)))


# -- t distribution -----------------------------------------------------------

def _betacf(a: float, b: float, x: float, tol: float = 1e-15, max_iter: int = 10_000) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    lbt = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(lbt)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("df must be positive")
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, betainc_regularized(df / 2.0, 0.5, x))


def t_cdf(t: float, df: float) -> float:
    p = 0.5 * t_sf_two_sided(t, df)
    return 1.0 - p if t > 0 else p


@dataclass
class RegressionResult:
    slope: float
    intercept: float
    p_value: float
    n: int
    r2: float
    t_stat: float
    stderr: float


def ols_regression(x, y) -> RegressionResult:
    """y = intercept + slope * x by least squares; two-sided t-test on the slope."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if n != len(y):
        raise ValueError("x and y differ in length")
    if n < 3:
        raise DegenerateRegressionError("need at least 3 points")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx <= 1e-300 * n or np.ptp(x) == 0:
        raise DegenerateRegressionError("x is constant")
    sxy = ((x - xm) * (y - ym)).sum()
    slope = sxy / sxx
    intercept = ym - slope * xm
    resid = y - intercept - slope * x
    sse = float((resid ** 2).sum())
    syy = float(((y - ym) ** 2).sum())
    r2 = 1.0 - sse / syy if syy > 0 else 1.0
    df = n - 2
    stderr = math.sqrt(sse / df / sxx)
    if stderr == 0:
        t, p = (math.inf if slope != 0 else 0.0), (0.0 if slope != 0 else 1.0)
    else:
        t = slope / stderr
        p = t_sf_two_sided(t, df)
    return RegressionResult(float(slope), float(intercept), float(p), n, float(r2), float(t), float(stderr))


# -- group analyses -----------------------------------------------------------

@dataclass
class GroupStats:
    name: str
    size: int
    robust_accuracy: float
    clean_accuracy: float
    mean_confidence: float  # mean true-class logit on clean inputs
    mean_adv_confidence: float


def group_robustness_report(model: Model, groups: dict, dataset: Dataset,
                            attack_config: AttackConfig) -> dict:
    """Robust accuracy and mean true-class logit for each named index group.

    Random starts are keyed on dataset indices, so a sample gets the same
    attack whichever group (or order) it appears in.
    """
    out = {}
    for name, idx in groups.items():
        idx = np.asarray(idx, dtype=np.int64)
        if len(idx) == 0:
            raise ValueError(f"group {name!r} is empty")
        y = dataset.labels[idx]
        res = attack(model, dataset.inputs[idx], y, attack_config, indices=idx)
        rows = np.arange(len(idx))
        out[name] = GroupStats(
            name=name,
            size=len(idx),
            robust_accuracy=float((~res.success).mean()),
            clean_accuracy=float(res.clean_correct.mean()),
            mean_confidence=float(res.clean_logits[rows, y].mean()),
            mean_adv_confidence=float(res.adv_logits[rows, y].mean()),
        )
    return out


@dataclass
class DistanceRecord:
    index: int
    label: int
    distance: float
    attack_success: bool
    confidence: float


def mrv_distance_analysis(model: Model, dataset: Dataset, mrv_table: MajorRegionTable,
                          attack_config: AttackConfig):
    """Per-sample distance to the class MRV, attack outcome and true-class logit.

    Also returns the OLS fit of confidence on distance over failed attacks
    (None when fewer than three failures or constant distance).
    """
    l = mrv_table.layer_index
    feats = model.features_numpy(dataset.inputs, l).astype(np.float64)
    mrv = mrv_table.mrv_matrix(dataset.num_classes)
    dist = np.linalg.norm(feats - mrv[dataset.labels], axis=1)
    res = run_attack(model, dataset, attack_config)
    conf = res.clean_logits[np.arange(len(dataset)), dataset.labels]
    records = [
        DistanceRecord(int(i), int(dataset.labels[i]), float(dist[i]), bool(res.success[i]), float(conf[i]))
        for i in range(len(dataset))
    ]
    failed = ~res.success
    fit = None
    if failed.sum() >= 3:
        try:
            fit = ols_regression(dist[failed], conf[failed])
        except DegenerateRegressionError:
            fit = None
    return records, fit


def write_distance_records(records, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "label", "distance", "attack_success", "confidence"])
        for r in records:
            w.writerow([r.index, r.label, f"{r.distance:.6f}", int(r.attack_success), f"{r.confidence:.6f}"])


def write_cosine_matrix(matrix: np.ndarray, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class"] + [f"c{j}" for j in range(len(matrix))])
        for i, row in enumerate(matrix):
            w.writerow([i] + [f"{v:.6f}" for v in row])
