import math

import numpy as np
import pytest
from scipy.special import expit

from lesionkit.gradcheck import check_objective_logits, random_instance
from lesionkit.losses import OBJECTIVES, LossConfig
from lesionkit.metrics import MetricConfig, aggregate, evaluate_case
from lesionkit.optim import (
    OptimConfig,
    OptimizationError,
    compare_objectives,
    optimize,
    rows_to_csv,
    sweep,
)
from lesionkit.phantom import PhantomSpec, benchmark_set, generate


@pytest.fixture(scope="module")
def big_lesion():
    return generate(PhantomSpec(dims=(24, 24, 24), lesions=((500, 1.0),), seed=11))


@pytest.fixture(scope="module")
def small_set():
    return benchmark_set(2, first_seed=0)


def test_dicece_fits_large_lesion(big_lesion):
    p, trace = optimize(big_lesion.image, big_lesion.mask, OptimConfig(objective="dicece", steps=500))
    assert trace.entries[-1].report.dice > 0.9
    assert trace.entries[-1].step == 500


def test_zero_steps_returns_initial_probabilities(big_lesion):
    p, trace = optimize(big_lesion.image, big_lesion.mask, OptimConfig(steps=0))
    np.testing.assert_array_equal(p.data, expit(-2.0))
    assert trace.steps == [0]


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_monotone_descent_small_lr(objective, big_lesion):
    cfg = OptimConfig(objective=objective, steps=30, learning_rate=0.01, record_every=1,
                      loss_cfg=LossConfig(warmup_T=1))
    _, trace = optimize(big_lesion.image, big_lesion.mask, cfg)
    losses = [e.loss for e in trace.entries[1:]]
    assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))


def test_trace_steps_and_schedule(big_lesion):
    cfg = OptimConfig(steps=105, record_every=10)
    _, trace = optimize(big_lesion.image, big_lesion.mask, cfg)
    assert trace.steps == list(range(0, 101, 10)) + [105]
    assert cfg.loss_cfg.warmup_T == 10
    assert trace.entries[0].lambda_cat == 0.0
    assert all(e.lambda_cat == cfg.loss_cfg.lambda_cat_final for e in trace.entries[1:])
    assert len({e.lambda_mil for e in trace.entries}) == 1


def test_deterministic_trace(small_set):
    ph = small_set[0]
    cfg = OptimConfig(steps=60, record_every=20)
    a_p, a_t = optimize(ph.image, ph.mask, cfg)
    b_p, b_t = optimize(ph.image, ph.mask, cfg)
    assert a_p.data.tobytes() == b_p.data.tobytes()
    assert a_t.to_csv() == b_t.to_csv()


@pytest.mark.parametrize("objective", OBJECTIVES)
def test_logit_space_gradient(objective):
    rng = np.random.default_rng(7)
    for _ in range(3):
        p, gt = random_instance(rng, (6, 6, 6))
        res = check_objective_logits(objective, np.log(p / (1 - p)), gt, LossConfig(warmup_T=5), step=3)
        assert res.max_rel_error < 1e-5


def test_mil_scores_non_decreasing_at_end(small_set):
    cfg = OptimConfig(objective="catmil", steps=200, record_every=2)
    for ph in small_set:
        _, trace = optimize(ph.image, ph.mask, cfg)
        tail = [e.detection_scores for e in trace.entries if e.step >= 180]
        for k in range(len(tail[0])):
            series = [s[k] for s in tail]
            assert all(b >= a for a, b in zip(series, series[1:]))


def test_non_finite_aborts_with_diagnostic(big_lesion):
    cfg = OptimConfig(objective="dicece", steps=3, learning_rate=1e308)
    with pytest.raises(OptimizationError, match="step"):
        optimize(big_lesion.image, big_lesion.mask, cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(objective="adam")
    with pytest.raises(ValueError):
        OptimConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        OptimConfig(record_every=0)
    cfg = OptimConfig(steps=40)
    assert OptimConfig.from_dict(cfg.to_dict()) == cfg


def test_compare_single_case_equals_report(small_set):
    ph = small_set[0]
    cfg = OptimConfig(objective="dicece", steps=40)
    rows = compare_objectives([ph], [cfg])
    p, _ = optimize(ph.image, ph.mask, cfg)
    report = evaluate_case((p.data > 0.5).astype(np.uint8), ph.mask)
    for key, value in report.to_row().items():
        assert rows[0][key] == value


def test_compare_duplicate_objective_rows_identical(small_set):
    cfg = OptimConfig(objective="catmil", steps=30)
    rows = compare_objectives(small_set, [cfg, cfg])
    assert rows[0] == rows[1]


def test_sweep_grid(small_set):
    base = OptimConfig(steps=30)
    rows = sweep(small_set, [0.1, 0.2], [0.1, 0.2], base)
    assert [(r["lambda_cat_final"], r["lambda_mil"]) for r in rows] == [(0.1, 0.1), (0.1, 0.2), (0.2, 0.1), (0.2, 0.2)]
    for r in rows:
        assert all(v is None or math.isfinite(v) for k, v in r.items())


def test_sweep_one_by_one_equals_compare(small_set):
    base = OptimConfig(steps=30)
    srow = sweep(small_set, [0.2], [0.3], base)[0]
    cfg = base.replace(loss_cfg=base.loss_cfg.replace(lambda_cat_final=0.2, lambda_mil=0.3))
    crow = compare_objectives(small_set, [cfg])[0]
    for key, value in crow.items():
        if key != "objective":
            assert srow[key] == value


def test_sweep_zero_pair_is_base_loss(small_set):
    base = OptimConfig(steps=30)
    srow = sweep(small_set, [0.0], [0.0], base)[0]
    crow = compare_objectives(small_set, [base.replace(objective="dicece")])[0]
    for key, value in crow.items():
        if key != "objective":
            assert srow[key] == value


def test_parallel_matches_serial(small_set):
    cfgs = [OptimConfig(objective="dicece", steps=20), OptimConfig(objective="catmil", steps=20)]
    assert compare_objectives(small_set, cfgs, jobs=1) == compare_objectives(small_set, cfgs, jobs=2)


def test_rows_to_csv_null():
    text = rows_to_csv([{"a": 1, "b": None, "c": 0.1}])
    assert text == "a,b,c\n1,null,0.1\n"


def test_catmil_finds_small_lesions_first():
    # early in a slow run the MIL term has already lifted every lesion
    phantoms = benchmark_set(3, first_seed=0)
    base = OptimConfig(steps=20, learning_rate=0.01, metric_cfg=MetricConfig(small_lesion_tau=10))
    dicece, catmil = compare_objectives(phantoms, [base.replace(objective="dicece"), base.replace(objective="catmil")])
    assert catmil["small_lesion_recall"] > dicece["small_lesion_recall"]
    assert catmil["fn_lesion_count"] < dicece["fn_lesion_count"]
