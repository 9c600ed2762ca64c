"""Acceptance criteria, each at its stated tolerance. One PASS/FAIL line per criterion."""
import statistics
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from segbench import bench
from segbench.autodiff import Tensor
from segbench.data import gen_airy_spots, make_folds
from segbench.errors import ConfigError, ShapeError
from segbench.gradsuite import CASES, run_suite
from segbench.metrics import ConfusionCounts, auc, auc_mw, confusion, evaluate, metrics_from_counts, roc_curve
from segbench.models import ARCHS, ModelConfig, build_model, load_checkpoint, save_checkpoint
from segbench.plots import write_summary
from segbench.training import TrainConfig, bce_loss, predict, snr_sweep, train


def verdict(number, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


# 1 -----------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = run_suite(instances=5, seed=0)
    seconds = time.perf_counter() - start
    failed = [r.name for r in results if not r.passed]
    archs = {f"arch.{a}" for a in ARCHS}
    worst = max(r.worst for r in results)
    ok = not failed and archs <= set(CASES) and all(len(r.errors) >= 5 for r in results) and seconds < 120
    verdict(1, ok, f"{len(results)} cases x 5 instances, worst rel err {worst:.2e} < 1e-4, failed {failed}, {seconds:.1f}s < 120s")


# 2 -----------------------------------------------------------------------------


def test_criterion_2_auc_equals_mann_whitney():
    rng = np.random.default_rng(2)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 501))
        labels = rng.integers(0, 2, size=n)
        labels[rng.choice(n, 2, replace=False)] = [0, 1]
        scores = rng.uniform(size=n)
        tied = rng.uniform(size=n) < 0.3
        scores[tied] = np.round(scores[tied], 1)  # inject ties
        worst = max(worst, abs(auc(roc_curve(scores, labels)) - auc_mw(scores, labels)))
    seconds = time.perf_counter() - start
    verdict(2, worst <= 1e-9 and seconds < 10, f"200 sets, max |trapezoid - MW| {worst:.1e} <= 1e-9, {seconds:.2f}s < 10s")


# 3 -----------------------------------------------------------------------------


def brute(pred, mask):
    tp = tn = fp = fn = 0
    for i in range(16):
        for j in range(16):
            hit = pred[i, j] >= 0.5
            if hit and mask[i, j]:
                tp += 1
            elif hit:
                fp += 1
            elif mask[i, j]:
                fn += 1
            else:
                tn += 1
    total = tp + tn + fp + fn
    return (
        ConfusionCounts(tp, tn, fp, fn),
        (tp + tn) / total,
        tp / (tp + fn) if tp + fn else None,
        tn / (tn + fp) if tn + fp else None,
    )


def test_criterion_3_metric_oracle():
    rng = np.random.default_rng(3)
    mismatches = 0
    for i in range(100):
        pred = rng.uniform(size=(16, 16))
        pred[rng.uniform(size=(16, 16)) < 0.1] = 0.5  # exercise the threshold boundary
        mask = (rng.uniform(size=(16, 16)) < rng.uniform(0, 0.5 if i % 10 else 0.0)).astype(np.uint8)
        counts = confusion(pred, mask)
        expected = brute(pred, mask)
        mismatches += (counts, *metrics_from_counts(counts)) != expected
    verdict(3, mismatches == 0, f"100 random 16x16 pairs, {mismatches} mismatches against the per-pixel loop")


# 4 -----------------------------------------------------------------------------


def test_criterion_4_fold_protocol():
    problems = []
    for n in range(5, 51):
        plan = make_folds(n, 5, seed=n)
        subsets = [set(s) for s in plan.subsets]
        if sorted(i for s in plan.subsets for i in s) != list(range(n)) or max(map(len, subsets)) - min(map(len, subsets)) > 1:
            problems.append((n, "partition"))
        tests = set()
        for f, fold in enumerate(plan.folds):
            train_, val, test = set(fold.train), set(fold.val), set(fold.test)
            if test != subsets[f] or val != subsets[(f + 1) % 5]:
                problems.append((n, f, "rotation"))
            if train_ & val or train_ & test or val & test or train_ | val | test != set(range(n)):
                problems.append((n, f, "disjointness"))
            others = [subsets[(f + j) % 5] for j in range(2, 5)]
            if train_ != set().union(*others):
                problems.append((n, f, "3:1:1"))
            tests |= test
        if tests != set(range(n)):
            problems.append((n, "coverage"))
    verdict(4, not problems, f"n = 5..50, partition/rotation/disjointness/3:1:1 violations: {problems[:3]}")


# 5 -----------------------------------------------------------------------------

CONVERGENCE = {
    "cnn": ModelConfig("cnn"),
    "unet": ModelConfig("unet"),
    "vit": ModelConfig("vit", features=48, depth=2, patch=4, heads=4),
    "vssm": ModelConfig("vssm", features=48, depth=2, patch=4, heads=4),
}


@pytest.mark.parametrize("arch", ARCHS)
def test_criterion_5_desk_convergence(arch):
    data = gen_airy_spots(0, size=32, n_images=8, snr=10.0, spots_per_image_range=(1, 3))
    model = build_model(CONVERGENCE[arch], seed=0)
    start = time.perf_counter()
    record = train(model, data, None, TrainConfig(epochs=500, lr=1e-3, batch=8, seed=0))
    seconds = time.perf_counter() - start
    x, y = data.stacked()
    probs = predict(model, x)
    loss = bce_loss(Tensor(probs), y).item()
    score = evaluate(probs, y).auc
    ok = record.steps <= 500 and loss < 0.1 and score > 0.95 and seconds < 300
    verdict(
        5,
        ok,
        f"{arch}: {record.steps} Adam steps, train BCE {loss:.4f} < 0.1, train AUC {score:.4f} > 0.95, {seconds:.0f}s < 300s",
    )


# 6 -----------------------------------------------------------------------------


def test_criterion_6_imbalance():
    data = gen_airy_spots(0, size=128, n_images=8)
    _, y = data.stacked()
    fraction = y.mean()
    report = evaluate(np.zeros_like(y), y)
    row = dict(arch="cnn", auc=report.auc, accuracy=report.accuracy, sensitivity=report.sensitivity,
               specificity=report.specificity, params=0, train_seconds=0.0)
    table = write_summary([row])
    rendered = all(f"| {name} | " in table and f"| {name} | n/a" not in table for name in ("AUC", "Accuracy", "Sensitivity", "Specificity"))
    ok = fraction < 0.01 and report.accuracy >= 0.99 and report.specificity == 1.0 and report.sensitivity == 0 and rendered
    verdict(
        6,
        ok,
        f"positive fraction {fraction:.4f} < 0.01, accuracy {report.accuracy:.4f} >= 0.99, "
        f"specificity {report.specificity}, sensitivity {report.sensitivity}, summary renders all four: {rendered}",
    )


# 7 -----------------------------------------------------------------------------


def test_criterion_7_snr_trend():
    start = time.perf_counter()
    gaps = []
    for seed in (0, 1, 2):
        table = snr_sweep(
            ModelConfig("cnn", features=8, depth=2),
            dict(kind="airy", seed=seed, size=32, n_images=10, params=dict(spots_per_image_range=(1, 3))),
            [1.0, 4.0, 20.0],
            TrainConfig(epochs=150, lr=3e-3, batch=8, crop=16, crops_per_image=8),
            k=5,
        )
        aucs = dict((snr, r.aggregate["auc"]) for snr, r in table)
        gaps.append(aucs[20.0] - aucs[1.0])
    seconds = time.perf_counter() - start
    median = statistics.median(gaps)
    verdict(7, median >= 0.05 and seconds < 1200, f"AUC(20) - AUC(1) per seed {[round(g, 3) for g in gaps]}, median {median:.3f} >= 0.05, {seconds:.0f}s < 1200s")


# 8 -----------------------------------------------------------------------------


def strip_column(text, column):
    lines = text.splitlines()
    header = next(i for i, l in enumerate(lines) if not l.startswith("#"))
    drop = lines[header].split(",").index(column)
    return [",".join(c for j, c in enumerate(l.split(",")) if j != drop) if i >= header else l for i, l in enumerate(lines)]


def test_criterion_8_determinism(tmp_path):
    raw = {
        "base_seed": 7,
        "dataset": {"kind": "airy", "n_images": 5, "size": 32, "params": {"spots_per_image_range": [1, 3]}},
        "model": {"arch": "cnn", "features": 4, "depth": 1},
        "train": {"epochs": 3, "batch": 4, "crop": 16, "crops_per_image": 2},
    }
    for name in ("a", "b"):
        bench.run(bench.config_from_dict(raw), str(tmp_path / name))
    same_losses = (tmp_path / "a" / "losses.csv").read_bytes() == (tmp_path / "b" / "losses.csv").read_bytes()
    same_roc = (tmp_path / "a" / "roc.csv").read_bytes() == (tmp_path / "b" / "roc.csv").read_bytes()
    metrics = [strip_column((tmp_path / n / "metrics.csv").read_text(), "train_seconds") for n in ("a", "b")]
    ok = same_losses and same_roc and metrics[0] == metrics[1]
    verdict(8, ok, f"metrics.csv (minus train_seconds) {metrics[0] == metrics[1]}, losses.csv {same_losses}, roc.csv {same_roc}")


# 9 -----------------------------------------------------------------------------


def random_config(rng, arch):
    if arch == "cnn":
        cfg = ModelConfig("cnn", features=int(rng.integers(1, 9)), depth=int(rng.integers(0, 4)))
        return cfg, int(rng.integers(5, 40)), int(rng.integers(5, 40))
    if arch == "unet":
        depth = int(rng.integers(0, 4))
        step = 2**depth
        cfg = ModelConfig("unet", features=int(rng.integers(1, 6)), depth=depth)
        return cfg, step * int(rng.integers(1, 5)), step * int(rng.integers(1, 5))
    heads = int(rng.choice([1, 2, 4]))
    patch = int(rng.choice([2, 4, 8]))
    cfg = ModelConfig(arch, features=heads * int(rng.integers(1, 4)) * 2, depth=int(rng.integers(0, 3)),
                      patch=patch, heads=heads, state_dim=int(rng.integers(1, 5)))
    return cfg, patch * int(rng.integers(1, 5)), patch * int(rng.integers(1, 5))


def test_criterion_9_shape_contracts():
    rng = np.random.default_rng(9)
    bad = []
    cases = 0
    for i in range(120):
        arch = ARCHS[i % 4]
        cfg, h, w = random_config(rng, arch)
        n = int(rng.integers(1, 4))
        out = build_model(cfg, seed=i).predict(rng.normal(size=(n, 1, h, w)))
        cases += 1
        if out.shape != (n, 1, h, w) or not np.all((out > 0) & (out < 1)):
            bad.append((cfg, h, w))

    rejected = 0
    attempts = [
        (ModelConfig("vit", features=8, patch=8, heads=2), 36),
        (ModelConfig("vssm", features=8, patch=8), 20),
        (ModelConfig("vit", features=8, patch=4, heads=2), 30),
        (ModelConfig("unet", features=4, depth=3), 36),
        (ModelConfig("unet", features=4, depth=2), 30),
    ]
    for cfg, crop in attempts:
        try:
            cfg.check_crop(crop)
        except ConfigError:
            try:
                build_model(cfg).predict(np.zeros((1, 1, crop, crop)))
            except ShapeError:
                rejected += 1
    ok = cases >= 100 and not bad and rejected == len(attempts)
    verdict(9, ok, f"{cases} random configs map [N,1,H,W] to [N,1,H,W] ({len(bad)} bad), {rejected}/{len(attempts)} indivisible crops rejected")


# 10 ----------------------------------------------------------------------------


def test_criterion_10_checkpoint_roundtrip(tmp_path):
    x = np.random.default_rng(10).normal(size=(2, 1, 32, 32))
    identical = {}
    for arch in ARCHS:
        model = build_model(ModelConfig(arch), seed=10)
        save_checkpoint(model, tmp_path / f"{arch}.ckpt")
        identical[arch] = load_checkpoint(tmp_path / f"{arch}.ckpt").predict(x).tobytes() == model.predict(x).tobytes()
    verdict(10, all(identical.values()), f"bit-identical forward after save/load: {identical}")
