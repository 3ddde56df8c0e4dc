"""Acceptance criteria, one test per criterion.

Each test prints a ``criterion N: PASS/FAIL`` line; the lines are also
repeated in the pytest terminal summary.
"""

import json
import time

import numpy as np
import pytest

from lesionkit.cli import main
from lesionkit.components import filter_small_components, label_components
from lesionkit.gradcheck import check_objective, random_instance
from lesionkit.losses import (
    OBJECTIVES,
    LossConfig,
    cat_index,
    cat_loss,
    component_weights,
    mil_loss,
    tversky_loss,
)
from lesionkit.metrics import MetricConfig, evaluate_case, hd95
from lesionkit.optim import OptimConfig, compare_objectives, optimize
from lesionkit.phantom import benchmark_set, benchmark_spec, generate
from lesionkit.volume import Volume, save_volume

from oracles import naive_report, plain_soft_dice, plain_tversky_loss
from test_metrics import assert_report_matches


@pytest.fixture(scope="module")
def benchmark():
    return benchmark_set(10, first_seed=0, lcnr=1.0)


def test_criterion_1_gradient_suite(record_criterion):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = {}
    for objective in OBJECTIVES:
        errs = []
        for _ in range(100):
            dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
            p, gt = random_instance(rng, dims)
            cfg = LossConfig(gamma=float(rng.choice([0.0, 0.5, 1.0])), warmup_T=10)
            errs.append(check_objective(objective, p, gt, cfg, step=int(rng.integers(0, 20))).max_rel_error)
        worst[objective] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-5 and elapsed < 60
    detail = f"max rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
    assert record_criterion("criterion 1 (gradient suite)", ok, detail), worst


def test_criterion_2_reduction_identities(record_criterion):
    rng = np.random.default_rng(99)
    worst_t = worst_d = 0.0
    for _ in range(50):
        dims = tuple(int(d) for d in rng.integers(2, 9, size=3))
        p, gt = random_instance(rng, dims)
        alpha, beta = float(rng.uniform(0.05, 1)), float(rng.uniform(0.05, 1))
        cfg = LossConfig(gamma=0.0, w_bg=1.0, alpha=alpha, beta=beta)
        cat = cat_loss(p, gt, cfg).value
        worst_t = max(worst_t, abs(cat - tversky_loss(p, gt, cfg).value),
                      abs(cat - plain_tversky_loss(p, gt, alpha, beta, cfg.delta)))
        half = LossConfig(alpha=0.5, beta=0.5, gamma=0.0, w_bg=1.0)
        worst_d = max(worst_d, abs(cat_index(p, gt, half) - plain_soft_dice(p, gt, 2 * half.delta)))
    ok = worst_t <= 1e-12 and worst_d <= 1e-12
    assert record_criterion("criterion 2 (reduction identities)", ok,
                            f"tversky {worst_t:.1e}, soft dice {worst_d:.1e}")


def test_criterion_3_lesion_balance(record_criterion):
    # components of 1, 10, 1e3 and 1e5 voxels, separated by empty slabs
    dims = (50, 50, 50 + 2 + 1 + 2 + 1 + 2 + 10)
    gt = np.zeros(dims, dtype=np.uint8)
    gt[:, :, :40] = 1  # 100000
    gt[0:10, 0:10, 42:52] = 1  # 1000
    gt[0:10, 0, 54] = 1  # 10
    gt[20, 20, 56] = 1  # 1
    lab = label_components(gt, 26)
    assert sorted(lab.sizes.tolist()) == [1, 10, 1000, 100000]
    w = component_weights(gt, LossConfig(gamma=1.0), lab).ravel(order="F")
    totals = [float(w[c.voxels].sum()) for c in lab.components]
    ok = all(1 - 1e-5 < t < 1 for t in totals)
    assert record_criterion("criterion 3 (lesion balance)", ok, f"totals {sorted(totals)}")


def test_criterion_4_mil_empty_gt(record_criterion):
    rng = np.random.default_rng(4)
    ok = True
    for dims in [(1, 1, 1), (4, 5, 6), (8, 8, 8)]:
        lv = mil_loss(rng.random(dims), np.zeros(dims, np.uint8))
        ok &= lv.value == 0.0 and not np.any(lv.grad) and lv.grad.shape == dims
    assert record_criterion("criterion 4 (MIL K=0 contract)", ok)


def test_criterion_5_metric_oracle(record_criterion):
    rng = np.random.default_rng(5)
    start = time.perf_counter()
    failures = 0
    for _ in range(200):
        dims = tuple(int(d) for d in rng.integers(1, 11, size=3))
        density = rng.uniform(0.0, 0.35)
        pred = (rng.random(dims) < density).astype(np.uint8)
        gt = (rng.random(dims) < rng.uniform(0.0, 0.35)).astype(np.uint8)
        spacing = tuple(float(s) for s in rng.choice([0.5, 1.0, 1.5, 3.0], size=3))
        try:
            assert_report_matches(evaluate_case(pred, gt, MetricConfig(), spacing), naive_report(pred, gt, spacing))
        except AssertionError:
            failures += 1
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 120
    assert record_criterion("criterion 5 (metric oracle equivalence)", ok, f"{failures} mismatches, {elapsed:.1f}s")


def test_criterion_6_hd95_hand_cases(record_criterion):
    m = np.zeros((6, 6, 6), np.uint8)
    m[1:4, 2:5, 1:3] = 1
    a = np.zeros((6, 3, 3), np.uint8)
    b = np.zeros((6, 3, 3), np.uint8)
    a[1, 1, 1] = 1
    b[4, 1, 1] = 1
    got = (hd95(m, m), hd95(a, b), hd95(a, b, spacing=(2, 1, 1)))
    ok = got == (0.0, 3.0, 6.0)
    assert record_criterion("criterion 6 (HD95 hand cases)", ok, f"{got}")


def _benchmark_predictions(phantoms):
    preds = []
    for ph in phantoms:
        # noisy intensity thresholds: plenty of small false-positive blobs
        for t in (1.5, 2.0, 2.5):
            preds.append((ph, (ph.image.data > t).astype(np.uint8)))
        for objective in ("dicece", "catmil"):
            for steps in (1, 5, 20):
                p, _ = optimize(ph.image, ph.mask, OptimConfig(objective=objective, steps=steps, learning_rate=0.05))
                preds.append((ph, (p.data > 0.5).astype(np.uint8)))
    return preds


def test_criterion_7_postprocessing_direction(record_criterion, benchmark):
    checked = violations = 0
    for ph, pred in _benchmark_predictions(benchmark):
        filtered = filter_small_components(pred, 5)
        before = evaluate_case(pred, ph.mask)
        after = evaluate_case(filtered, ph.mask)
        sizes = label_components(filtered).sizes
        checked += 1
        if after.fp_volume_mm3 > before.fp_volume_mm3 or after.fn_lesion_count < before.fn_lesion_count:
            violations += 1
        elif sizes.size and sizes.min() < 5:
            violations += 1
    ok = violations == 0
    assert record_criterion("criterion 7 (post-processing direction)", ok,
                            f"{checked} predictions, {violations} violations")


def test_criterion_8_directional_small_lesion(record_criterion, benchmark):
    start = time.perf_counter()
    base = OptimConfig(steps=500, init_logit=-2.0, metric_cfg=MetricConfig(small_lesion_tau=10))
    configs = [base.replace(objective="dicece"), base.replace(objective="catmil")]
    dicece, catmil = compare_objectives(benchmark, configs, jobs=2)
    elapsed = time.perf_counter() - start
    ok = (catmil["small_lesion_recall"] >= dicece["small_lesion_recall"]
          and catmil["fn_lesion_count"] <= dicece["fn_lesion_count"]
          and elapsed < 300)
    detail = (f"small recall catmil {catmil['small_lesion_recall']:.4f} vs dicece {dicece['small_lesion_recall']:.4f}; "
              f"fn count {catmil['fn_lesion_count']} vs {dicece['fn_lesion_count']}; {elapsed:.1f}s")
    assert record_criterion("criterion 8 (directional small-lesion experiment)", ok, detail)


def test_criterion_9_schedule(record_criterion, benchmark):
    ph = benchmark[0]
    cfg = OptimConfig(objective="catmil", steps=60, record_every=1,
                      loss_cfg=LossConfig(lambda_cat_final=0.2, lambda_mil=0.15, warmup_T=20))
    _, trace = optimize(ph.image, ph.mask, cfg)
    lam = np.array([e.lambda_cat for e in trace.entries])
    steps = np.array(trace.steps)
    expected = 0.2 * np.minimum(steps / 20, 1.0)
    ok = (lam[0] == 0.0 and lam[20] == 0.2 and np.all(lam[20:] == 0.2)
          and np.allclose(lam, expected, rtol=0, atol=1e-15)
          and len({e.lambda_mil for e in trace.entries}) == 1 and trace.entries[0].lambda_mil == 0.15)
    assert record_criterion("criterion 9 (schedule check)", ok)


def _run_outputs(root, tag, jobs, masks):
    out = root / tag
    cmds = [
        ["gen", "--spec", str(root / "spec.json"), "--out-dir", str(out / "gen")],
        ["eval", "--pred", str(masks / "pred"), "--gt", str(masks / "gt"), "--out", str(out / "eval.csv"),
         "--jobs", str(jobs)],
        ["postprocess", "--in", str(masks / "pred" / "c0.npy"), "--out", str(out / "pp.npy")],
        ["optimize", "--phantom-seed", "3", "--steps", "30", "--out-dir", str(out / "opt")],
        ["compare", "--objectives", "dicece,catmil", "--phantoms", "3", "--steps", "30",
         "--out", str(out / "compare.csv"), "--jobs", str(jobs)],
        ["sweep", "--grid-lambda-cat", "0.1,0.2", "--grid-lambda-mil", "0.1", "--phantoms", "2", "--steps", "20",
         "--out", str(out / "sweep.csv"), "--jobs", str(jobs)],
    ]
    for cmd in cmds:
        assert main(["--run-json", str(out / "runs" / f"{cmd[0]}.json"), *cmd]) == 0
    files = sorted(p for p in out.rglob("*") if p.suffix in (".csv", ".npy"))
    return {str(p.relative_to(out)): p.read_bytes() for p in files}


def test_criterion_10_determinism(record_criterion, tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps({"dims": [16, 16, 16], "lesions": [{"size": 8}, {"size": 30}],
                                                     "seed": 5, "n_cases": 2}))
    masks = tmp_path / "masks"
    for i in range(3):
        ph = generate(benchmark_spec(i))
        save_volume(ph.mask, masks / "gt" / f"c{i}.npy")
        save_volume(Volume((ph.image.data > 1.5).astype(np.uint8), ph.image.spacing), masks / "pred" / f"c{i}.npy")

    a = _run_outputs(tmp_path, "a", 1, masks)
    b = _run_outputs(tmp_path, "b", 1, masks)
    c = _run_outputs(tmp_path, "c", 2, masks)
    ok = len(a) >= 8 and a == b == c
    assert record_criterion("criterion 10 (determinism)", ok, f"{len(a)} output files compared across 3 runs")
