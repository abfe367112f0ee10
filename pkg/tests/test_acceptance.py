"""Acceptance criteria, one test per criterion.

Each test prints a single ``[PASS]``/``[FAIL]`` line with the measured values
and the pinned tolerance; the lines are repeated in the terminal summary.
Criteria 5-7 train desk-scale MNIST models and take a few minutes.
"""

import time

import mpmath as mp
import numpy as np
import pytest

from prslab import autodiff as ad
from prslab.attacks import AttackConfig, attack, fgsm, pgd
from prslab.autodiff import Tensor
from prslab.data import (DataFormatError, DataLengthError, Dataset, cifar10_bytes, idx_bytes, load_cifar10,
                         load_idx, make_blobs)
from prslab.experiment import collect_reports, load_config, run_regress, run_train
from prslab.nn import CheckpointError, Model, checkpoint_bytes, cnn4, mlp, parse_checkpoint
from prslab.regions import build_prs, inclusion_split, major_regions, plane_slice_region_map
from prslab.stats import cosine_matrix, group_robustness_report, t_sf_two_sided
from prslab.training import TrainConfig, loss_ham, loss_mrv, train

from conftest import (ACCEPTANCE_LINES, brute_force_patterns, dense_model, numerical_grad, rel_err, write_idx_images,
                      write_idx_labels)

pytestmark = pytest.mark.acceptance


def verdict(request, capsys, num, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num:>2}: {detail}"
    request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
    with capsys.disabled():
        print("\n" + line)
    assert ok, line


# -- 1 ---------------------------------------------------------------------------

def _fd_rel(fn, inputs, h=1e-6):
    ts = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    ad.backward(fn(*ts))
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(v, k=k):
            args = [Tensor(np.array(a, dtype=np.float64)) for a in inputs]
            args[k] = Tensor(v)
            return float(fn(*args).data)
        worst = max(worst, rel_err(ts[k].grad, numerical_grad(f, x, h)))
    return worst


def test_criterion_1_gradient_oracle(request, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    x_relu = np.where(np.abs(a) < 0.05, 0.5, a)
    y = rng.integers(0, 5, 4)
    sq = lambda t: ad.tsum(ad.square(t))  # noqa: E731
    ops = {
        "matmul": (lambda p, q: sq(ad.matmul(p, q)), [a, rng.normal(size=(5, 3))]),
        "add_bias": (lambda p, q: sq(ad.add_bias(p, q)), [a, rng.normal(size=5)]),
        "add_bias_4d": (lambda p, q: sq(ad.add_bias(p, q)), [rng.normal(size=(2, 3, 2, 2)), rng.normal(size=3)]),
        "add": (lambda p, q: sq(ad.add(p, q)), [a, b]),
        "sub": (lambda p, q: sq(ad.sub(p, q)), [a, b]),
        "mul": (lambda p, q: ad.tsum(ad.mul(p, q)), [a, b]),
        "neg": (lambda p: sq(ad.neg(p)), [a]),
        "square": (lambda p: ad.tsum(ad.square(p)), [a]),
        "relu": (lambda p: sq(ad.relu(p)), [x_relu]),
        "sum": (lambda p: ad.tsum(ad.mul(p, p)), [a]),
        "mean": (lambda p: ad.mean(ad.square(p)), [a]),
        "reshape": (lambda p: sq(ad.reshape(p, (5, 4))), [a]),
        "flatten": (lambda p: sq(ad.flatten(p)), [rng.normal(size=(2, 3, 2))]),
        "cross_entropy": (lambda p: ad.softmax_cross_entropy(p, y), [a]),
        "conv2d": (lambda p, q: sq(ad.conv2d(p, q, 2, 1)), [rng.normal(size=(2, 2, 5, 5)),
                                                             rng.normal(size=(3, 2, 3, 3))]),
    }
    op_err = {name: _fd_rel(fn, xs) for name, (fn, xs) in ops.items()}

    from prslab.regions import MajorRegion, MajorRegionTable
    table = MajorRegionTable(1, {c: MajorRegion(None, 1, rng.normal(size=6)) for c in range(3)})
    feats, labels = rng.normal(size=(5, 6)), np.array([0, 1, 2, 1, 0])
    feats = np.where(np.abs(feats) < 0.05, 0.3, feats)
    loss_err = {
        "L_MRV": _fd_rel(lambda f: loss_mrv(f, labels, table), [feats]),
        "L_ham_surrogate": _fd_rel(lambda f: loss_ham(f, labels, table), [feats]),
    }
    secs = time.perf_counter() - t0
    ok = max(op_err.values()) < 1e-3 and max(loss_err.values()) < 1e-4 and secs < 30
    verdict(request, capsys, 1, ok,
            f"{len(op_err)} ops max rel err {max(op_err.values()):.1e} (<1e-3), losses "
            f"{max(loss_err.values()):.1e} (<1e-4), {secs:.1f}s (<30s)")


# -- 2 ---------------------------------------------------------------------------

def test_criterion_2_prs_oracle(request, capsys):
    t0 = time.perf_counter()
    mismatches = 0
    for i in range(50):
        rng = np.random.default_rng(100 + i)
        d = int(rng.integers(2, 8))
        hidden = [int(rng.integers(2, 17)) for _ in range(int(rng.integers(1, 3)))]
        m = Model(mlp(hidden, 3), (1, 1, d), seed=i, dtype=np.float64)
        n = int(rng.integers(1, 501))
        x = rng.uniform(0, 1, size=(n, 1, 1, d))
        dup = rng.random(n) < 0.3  # exact repeats share a region for sure
        x[dup] = x[rng.integers(0, n, dup.sum())]
        ds = Dataset(x, rng.integers(0, 3, n), num_classes=3)
        l = m.penultimate_index
        rs = build_prs(m, ds, l)
        f = m.features_numpy(x, l)
        expected = brute_force_patterns(f)
        got = [tuple(int(s > 0) for s in p.signs()) for p in rs.patterns()]
        # per-pattern occupancy by brute force too
        signs = [tuple(int(v > 0) for v in row) for row in f]
        counts_ok = all(int(rs.counts[p].sum()) == sum(s == g for s in signs) for p, g in zip(rs.patterns(), got))
        if sorted(got) != sorted(expected) or len(got) != len(expected) or not counts_ok:
            mismatches += 1
    secs = time.perf_counter() - t0
    verdict(request, capsys, 2, mismatches == 0 and secs < 60,
            f"{mismatches}/50 instances differ from brute force, {secs:.1f}s (<60s)")


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_attack_contracts(request, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    models = [Model(mlp([int(rng.integers(2, 12))], 3), (1, 1, 4), seed=s, dtype=np.float64) for s in range(20)]
    budget = clip = reduction = 0
    n = 10_000
    for i in range(n):
        m = models[i % len(models)]
        x = rng.uniform(0, 1, size=(int(rng.integers(1, 5)), 1, 1, 4))
        x[rng.random(x.shape) < 0.2] = rng.choice([0.0, 1.0])  # boundary pixels
        y = rng.integers(0, 3, len(x))
        eps = float(rng.choice([0.0, rng.uniform(0, 0.5)]))
        method = ["fgsm", "bim", "pgd"][i % 3]
        cfg = AttackConfig(method, eps, step_size=eps * rng.uniform(0.05, 1), num_steps=int(rng.integers(1, 6)),
                           seed=int(rng.integers(1 << 30)))
        out = attack(m, x, y, cfg)
        budget += np.abs(out.x_adv - x).max() > eps + 1e-6
        clip += out.x_adv.min() < 0 or out.x_adv.max() > 1
        if method == "fgsm":
            one = pgd(m, x, y, AttackConfig("pgd", eps, step_size=eps, num_steps=1, random_start=False))
            reduction += not np.array_equal(one.x_adv, fgsm(m, x, y, cfg).x_adv)
    secs = time.perf_counter() - t0
    verdict(request, capsys, 3, budget == clip == reduction == 0,
            f"{n} invocations: {budget} budget, {clip} clip, {reduction} pgd(k=1)!=fgsm violations "
            f"(tol 1e-6), {secs:.1f}s")


# -- 4 ---------------------------------------------------------------------------

def test_criterion_4_statistics_oracle(request, capsys):
    mp.mp.dps = 30
    worst = 0.0
    for df in (3, 10, 100):
        nu = mp.mpf(df)
        c = mp.gamma((nu + 1) / 2) / (mp.sqrt(nu * mp.pi) * mp.gamma(nu / 2))
        for t in np.linspace(-10, 10, 81):
            oracle = float(2 * mp.quad(lambda s: c * (1 + s * s / nu) ** (-(nu + 1) / 2), [abs(mp.mpf(t)), mp.inf]))
            worst = max(worst, abs(t_sf_two_sided(t, df) - oracle))
    rng = np.random.default_rng(4)
    sym = scale = 0.0
    for _ in range(200):
        w = rng.normal(size=(int(rng.integers(2, 12)), int(rng.integers(1, 30))))
        m = cosine_matrix(w)
        sym = max(sym, np.abs(m - m.T).max())
        scale = max(scale, np.abs(cosine_matrix(w * 10 ** rng.uniform(-3, 3)) - m).max())
    ok = worst < 1e-6 and sym < 1e-6 and scale < 1e-6
    verdict(request, capsys, 4, ok,
            f"p-value max |err| {worst:.1e} over t in [-10,10], df in {{3,10,100}} (<1e-6); cosine asymmetry "
            f"{sym:.1e}, scale drift {scale:.1e} (<1e-6)")


# -- 5, 6 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mnist_root(tmp_path_factory):
    pytest.importorskip("mlxtend")
    return str(tmp_path_factory.mktemp("mnist5k"))


@pytest.fixture(scope="module")
def desk_models(mnist_root, tmp_path_factory):
    """MLP-2 trained with standard CE and with L_PRS (5 warm-up + 20 epochs), each attacked by PGD-20."""
    out = tmp_path_factory.mktemp("desk")
    runs = {}
    t0 = time.perf_counter()
    for scheme in ("standard", "prs"):
        cfg = load_config(f"mnist-desk-{scheme}")
        cfg["dataset"]["root"] = mnist_root
        cfg["attacks"] = {"methods": ["pgd20"], "epsilons": [0.1]}
        (rep,) = run_train(cfg, out / scheme, log=lambda *a: None)
        runs[scheme] = rep
    runs["seconds"] = time.perf_counter() - t0
    runs["dir"] = out
    return runs


def test_criterion_5_prs_training_improves_robustness(request, capsys, desk_models):
    std, prs = desk_models["standard"], desk_models["prs"]
    ra_s, ra_p = std.robust_accuracy["PGD-20@0.1"], prs.robust_accuracy["PGD-20@0.1"]
    gain = 100 * (ra_p - ra_s)
    acc_gap = 100 * abs(prs.test_accuracy - std.test_accuracy)
    secs = desk_models["seconds"]
    ok = gain >= 5 and acc_gap <= 3 and prs.prs_ratio < std.prs_ratio and secs < 900
    verdict(request, capsys, 5, ok,
            f"PGD-20 robust acc standard {ra_s:.3f} vs L_PRS {ra_p:.3f} (gain {gain:+.1f} pts, need >=5); "
            f"test acc {std.test_accuracy:.3f} vs {prs.test_accuracy:.3f} (gap {acc_gap:.1f}, <=3); "
            f"PRS ratio {std.prs_ratio:.3f} vs {prs.prs_ratio:.3f} (need lower); {secs:.0f}s (<900s)")


def test_criterion_6_inclusion_vs_exclusion(request, capsys, desk_models, mnist_root):
    from prslab.experiment import load_datasets
    from prslab.nn import load_checkpoint
    run_dir = desk_models["dir"] / "prs"
    model, _ = load_checkpoint(run_dir / desk_models["prs"].checkpoint)
    cfg = load_config("mnist-desk-prs")
    cfg["dataset"]["root"] = mnist_root
    train_ds, test_ds = load_datasets(cfg)
    l = model.penultimate_index
    inc, exc, ratio = inclusion_split(model, build_prs(model, train_ds, l), test_ds, l)
    correct = model.predict(test_ds.inputs) == test_ds.labels
    inc, exc = inc[correct[inc]][:1000], exc[correct[exc]][:1000]
    pgd20 = AttackConfig("pgd", 0.1, num_steps=20, seed=0)
    if len(exc) == 0:
        verdict(request, capsys, 6, True, f"exclusion group empty (inclusion ratio {ratio:.3f}); passes vacuously")
        return
    if len(inc) == 0:
        verdict(request, capsys, 6, False,
                f"inclusion group empty (inclusion ratio {ratio:.3f}, {len(exc)} excluded); comparison undefined")
        return
    rep = group_robustness_report(model, {"inclusion": inc, "exclusion": exc}, test_ds, pgd20)
    a, b = rep["inclusion"].robust_accuracy, rep["exclusion"].robust_accuracy
    verdict(request, capsys, 6, a >= b,
            f"PGD-20 robust acc inclusion {a:.3f} (n={len(inc)}) vs exclusion {b:.3f} (n={len(exc)}); need >=")


# -- 7 ---------------------------------------------------------------------------

def test_criterion_7_prs_ratio_regression(request, capsys, mnist_root, tmp_path_factory):
    cfg = load_config("mnist-batchsize-sweep")
    cfg["dataset"]["root"] = mnist_root
    out = tmp_path_factory.mktemp("sweep")
    t0 = time.perf_counter()
    run_train(cfg, out, log=lambda *a: None)
    reports = collect_reports([out])
    fits = run_regress(reports, out / "regression")
    ra, inc = fits["robust_accuracy"], fits["inclusion_ratio"]
    seeds = {r.seed for r in reports}
    sizes = {r.batch_size for r in reports}
    ok = (len(reports) >= 20 and len(seeds) >= 2 and len(sizes) >= 2 and ra.slope < 0 and ra.p_value < 0.05
          and inc.slope < 0)
    verdict(request, capsys, 7, ok,
            f"{len(reports)} checkpoints ({len(seeds)} seeds x {len(sizes)} batch sizes): PRS->robust acc "
            f"coef {ra.slope:.3f} p={ra.p_value:.1e} (need <0, p<0.05); PRS->inclusion coef {inc.slope:.3f} "
            f"p={inc.p_value:.1e} (need <0); {time.perf_counter() - t0:.0f}s")


# -- 8 ---------------------------------------------------------------------------

def test_criterion_8_zero_hamming_bounds_prs(request, capsys):
    checked = violations = 0
    for seed in range(200):
        rng = np.random.default_rng(seed)
        c, d = int(rng.integers(2, 6)), int(rng.integers(2, 10))
        signs = rng.choice([-1.0, 1.0], size=(c, d))
        y = rng.integers(0, c, int(rng.integers(c, 80)))
        y[:c] = np.arange(c)
        x = 0.5 + signs[y] * rng.uniform(1e-3, 0.5, size=(len(y), d))
        ds = Dataset(x.reshape(-1, 1, 1, d), y, num_classes=c)
        m = dense_model([np.eye(d), rng.normal(size=(d, c))], [np.full(d, -0.5), np.zeros(c)], d)
        table = major_regions(build_prs(m, ds, 1), m, ds, 1)
        if float(loss_ham(m.features_numpy(ds.inputs, 1), y, table, "exact").data) == 0:
            checked += 1
            violations += len(build_prs(m, ds, 1)) / len(ds) > c / len(ds)
    # a trained net: keep the training samples with zero per-sample Hamming error
    means = np.random.default_rng(8).uniform(0.2, 0.8, size=(3, 8))
    ds = make_blobs(3, 100, 8, 0.05, seed=8, means=means)
    model = Model(mlp([16, 8], 3), ds.input_shape, seed=8)
    model, log = train(model, ds, TrainConfig(scheme="prs", epochs=15, warmup_epochs=5, batch_size=32, lr=3e-3))
    l = model.penultimate_index
    f = model.features_numpy(ds.inputs, l)
    s = np.where(log.mrv_table.mrv_matrix(3)[ds.labels] > 0, 1, 0)
    zero = np.flatnonzero(((f > 0).astype(int) == s).all(axis=1))
    sub = ds.take(zero)
    trained_ok = len(zero) > 0 and float(loss_ham(f[zero], sub.labels, log.mrv_table, "exact").data) == 0 \
        and len(build_prs(model, sub, l)) <= 3
    verdict(request, capsys, 8, violations == 0 and checked == 200 and trained_ok,
            f"{checked} fixtures with exact L_ham=0, {violations} exceed num_classes/|set|; trained blobs net: "
            f"{len(zero)} zero-Hamming samples occupy {len(build_prs(model, sub, l)) if len(zero) else 0} regions (<=3)")


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_slice_half_plane(request, capsys):
    wrong = 0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 10))
        w, b = rng.normal(size=(d, 1)), rng.normal(size=1) * 0.3
        m = dense_model([w, rng.normal(size=(1, 2))], [b, np.zeros(2)], d)
        sm = plane_slice_region_map(m, rng.uniform(0, 1, size=(3, 1, 1, d)), grid=(200, 200), l=1)
        on = np.array([p.signs()[0] > 0 for p in sm.patterns])[sm.region_ids]
        a0 = sm.origin @ w[:, 0] + b[0]
        a1, a2 = sm.basis @ w[:, 0]
        wrong += int((on != (a0 + a1 * sm.u[:, None] + a2 * sm.v[None, :] > 0)).sum())
    verdict(request, capsys, 9, wrong == 0, f"{wrong} misclassified cells over 10 maps at 200x200 (need 0)")


# -- 10 --------------------------------------------------------------------------

def test_criterion_10_format_round_trips(request, capsys, tmp_path):
    rng = np.random.default_rng(10)
    failures = []
    pix = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    write_idx_images(tmp_path / "i", pix)
    write_idx_labels(tmp_path / "l", [7, 0, 9])
    img, lab = idx_bytes(load_idx(tmp_path / "i", tmp_path / "l"))
    (tmp_path / "i2").write_bytes(img)
    (tmp_path / "l2").write_bytes(lab)
    if img != (tmp_path / "i").read_bytes() or lab != (tmp_path / "l").read_bytes() \
            or idx_bytes(load_idx(tmp_path / "i2", tmp_path / "l2")) != (img, lab):
        failures.append("idx")

    rec = np.concatenate([rng.integers(0, 10, size=(2, 1)), rng.integers(0, 256, size=(2, 3072))], axis=1)
    raw = rec.astype(np.uint8).tobytes()
    (tmp_path / "c").write_bytes(raw)
    if cifar10_bytes(load_cifar10(tmp_path / "c")) != raw:
        failures.append("cifar")

    for m in (Model(mlp([6, 4], 3), (1, 1, 5), seed=1, dtype=np.float64),
              Model(cnn4(), (3, 8, 8), seed=2).freeze_final_layer()):
        ck = checkpoint_bytes(m, epoch=4)
        if checkpoint_bytes(parse_checkpoint(ck)[0], epoch=4) != ck:
            failures.append("checkpoint")

    def raises(exc, fn):
        try:
            fn()
        except exc:
            return True
        except Exception:  # noqa: BLE001
            return False
        return False

    bad_magic = bytearray((tmp_path / "i").read_bytes())
    bad_magic[2] = 0x09
    (tmp_path / "bm").write_bytes(bytes(bad_magic))
    (tmp_path / "tr").write_bytes((tmp_path / "i").read_bytes()[:-5])
    (tmp_path / "ct").write_bytes(raw[:-1])
    errors = {
        "idx magic": raises(DataFormatError, lambda: load_idx(tmp_path / "bm", tmp_path / "l")),
        "idx truncated": raises(DataLengthError, lambda: load_idx(tmp_path / "tr", tmp_path / "l")),
        "cifar truncated": raises(DataFormatError, lambda: load_cifar10(tmp_path / "ct")),
        "ckpt magic": raises(CheckpointError, lambda: parse_checkpoint(b"BADMAGIC" + ck[8:])),
        "ckpt truncated": raises(CheckpointError, lambda: parse_checkpoint(ck[:-3])),
    }
    failures += [k for k, ok in errors.items() if not ok]
    verdict(request, capsys, 10, not failures,
            "IDX, CIFAR-10 and checkpoint round trips byte-identical; corrupted fixtures raise documented errors"
            if not failures else f"failed: {failures}")
