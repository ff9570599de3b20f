import csv

import numpy as np
import pytest

from invpaint import nets as N
from invpaint.evalmetrics import (
    ABLATION_FIELDS,
    METRICS_FIELDS,
    TRACE_FIELDS,
    ablation_report,
    alignment_accuracy,
    background_mse,
    background_x0_trace,
    gauss_diagnostics,
    make_cases,
    mean_trace,
    run_case,
    run_eval,
    trace_rows,
    train_probe,
    write_csv,
)
from invpaint.pipelines import TrainConfig, distill_generator, train_teacher
from invpaint.rng import RngStream
from invpaint.schedule import make_linear_schedule
from invpaint.synth import SynthSpec, gen_batch

SCHED = make_linear_schedule(100)
TCFG = N.BackboneConfig(base_channels=8, emb_width=16, timesteps=100)
GCFG = N.BackboneConfig(base_channels=6, emb_width=16, timesteps=100)
SPEC = SynthSpec()


# -- Gaussianity diagnostics ------------------------------------------


def test_normal_sample_has_tiny_jsd():
    x = RngStream(0, "g").normal((100_000,))
    d = gauss_diagnostics(x, bins=64)
    assert d.jsd < 0.003
    assert abs(d.mean) < 0.02 and abs(d.variance - 1) < 0.02
    assert abs(d.skewness) < 0.05 and abs(d.kurtosis) < 0.1


def test_constant_sample_is_far_from_gaussian():
    d = gauss_diagnostics(np.zeros(1000), bins=64)
    assert 0.5 <= d.jsd <= np.log(2) + 1e-12
    assert d.variance == 0.0


def test_jsd_bounds_and_sample_floor():
    with pytest.raises(ValueError, match="samples"):
        gauss_diagnostics(np.zeros(100), bins=64)
    x = RngStream(1, "g").uniform(-4, 4, (5000,))
    d = gauss_diagnostics(x, bins=64)
    assert 0.0 <= d.jsd <= np.log(2)


def test_diag_permutation_and_translation():
    x = RngStream(2, "g").normal((2000,)).astype(np.float64)
    a = gauss_diagnostics(x, bins=64)
    b = gauss_diagnostics(np.random.default_rng(0).permutation(x), bins=64)
    assert b.jsd == a.jsd  # histogram is order-free
    assert b.mean == pytest.approx(a.mean, abs=1e-12)
    assert b.variance == pytest.approx(a.variance, rel=1e-12)
    c = gauss_diagnostics(x + 1.5, bins=64)
    assert c.mean == pytest.approx(a.mean + 1.5, abs=1e-12)


def test_out_of_range_mass_goes_to_edge_bins():
    # huge values must still produce a valid distribution, not be dropped
    x = np.concatenate([RngStream(3, "g").normal((1000,)), np.full(500, 40.0)])
    d = gauss_diagnostics(x, bins=64)
    assert np.isfinite(d.jsd) and d.jsd > 0.05


# -- background trace --------------------------------------------------


def test_background_mse_zero_for_composite():
    gt = RngStream(4, "g").normal((1, 8, 8))
    M = np.zeros((8, 8), dtype=np.float32)
    M[:3] = 1.0
    composite = np.where(M[None] != 0, 123.0, gt)
    assert background_mse(composite, gt, M[None]) == 0.0


def test_background_mse_empty_background_warns():
    gt = np.ones((1, 4, 4), dtype=np.float32)
    with pytest.warns(UserWarning, match="empty background"):
        assert background_mse(gt * 2, gt, np.ones((1, 4, 4))) == 0.0


def test_background_trace_naive_oracle():
    gt = RngStream(5, "g").normal((1, 4, 4))
    M = np.zeros((4, 4), dtype=np.float32)
    M[0, 0] = 1.0
    x0 = RngStream(6, "g").normal((1, 1, 4, 4))
    got = background_x0_trace([x0], gt, M)[0]
    acc, n = 0.0, 0
    for i in range(4):
        for j in range(4):
            if M[i, j] == 0:
                acc += (x0[0, 0, i, j] - gt[0, i, j]) ** 2
                n += 1
    assert got == pytest.approx(acc / n, rel=1e-6)


# -- probe -------------------------------------------------------------


@pytest.fixture(scope="module")
def probe():
    return train_probe(SPEC, seed=0)


def test_probe_held_out_accuracy(probe):
    _, acc = probe
    assert acc > 0.95


def test_probe_on_ground_truth_and_random_labels(probe):
    p, _ = probe
    imgs, classes = gen_batch(SPEC, 400, RngStream(50, "c"), RngStream(50, "s"))
    assert alignment_accuracy(imgs, classes, p) > 0.95
    shuffled = np.roll(classes, 1)
    base = alignment_accuracy(imgs, shuffled, p)
    n, q = 400, 1.0 / SPEC.n_classes
    sigma = np.sqrt(q * (1 - q) / n)
    assert abs(base - q) < 4 * sigma


def test_probe_deterministic():
    a, _ = train_probe(SPEC, seed=1, steps=30)
    b, _ = train_probe(SPEC, seed=1, steps=30)
    for k in a:
        np.testing.assert_array_equal(a[k].data, b[k].data)


# -- harness and reports ----------------------------------------------


@pytest.fixture(scope="module")
def tiny_models():
    tc = TrainConfig(batch=4, steps=20, lr=1e-3, distill_ddim_steps=4)
    teacher = train_teacher(tc, SPEC, TCFG, SCHED)
    gen = distill_generator(tc, teacher, TCFG, GCFG, SCHED)
    return teacher, gen


def test_run_eval_reports_and_rows(tiny_models, probe):
    teacher, _ = tiny_models
    p, _ = probe
    cases = make_cases(SPEC, 4, seed=7, n_steps=3)
    reports = run_eval(cases, teacher, TCFG, SCHED, seed=7, probe=p)
    assert len(reports) == 4
    for r in reports:
        assert len(r.bg_trace) == 3
        assert r.bg_mse_final == r.bg_trace[-1]
        assert r.align in (0, 1)
        assert r.latency_ms is None  # timing is opt-in
    assert mean_trace(reports).shape == (3,)
    assert len(trace_rows(reports)) == 12


def test_run_case_timing_flag(tiny_models):
    teacher, _ = tiny_models
    case = make_cases(SPEC, 1, seed=7, n_steps=2)[0]
    rep, res = run_case(case, teacher, TCFG, SCHED, seed=7, timing=True)
    assert rep.latency_ms > 0
    keep = case.request.mask.M[None] == 0
    np.testing.assert_array_equal(res.output[keep], case.request.image_masked[keep])


def test_run_case_requires_inverter_for_inverfill(tiny_models):
    teacher, _ = tiny_models
    case = make_cases(SPEC, 1, seed=7, n_steps=2, init_mode="inverfill")[0]
    with pytest.raises(ValueError, match="inversion network"):
        run_case(case, teacher, TCFG, SCHED, seed=7)


def test_csv_roundtrip(tmp_path):
    rows = [{"case_id": 0, "init_mode": "random", "steps": 2,
             "bg_mse_final": repr(0.125), "jsd": "", "align": 1,
             "latency_ms": None}]
    path = tmp_path / "metrics.csv"
    write_csv(path, METRICS_FIELDS, rows, header_comment="hash=abc seed=0")
    with open(path) as f:
        assert f.readline().startswith("# hash=abc")
        got = list(csv.DictReader(f))
    assert got[0]["bg_mse_final"] == "0.125"
    assert got[0]["latency_ms"] == ""


def test_ablation_report_structure(tiny_models, tmp_path):
    teacher, gen = tiny_models
    tc = TrainConfig(batch=4, steps=2, lr=1e-3)
    rows = ablation_report(tc, gen, teacher, GCFG, TCFG, N.DiscConfig(),
                           SCHED, SPEC, n_cases=2, n_steps=2)
    assert [r["config_name"] for r in rows] == [
        "recons_only", "plus_reblend", "plus_gaussreg", "plus_adversarial"
    ]
    for r in rows:
        assert float(r["bg_mse_final"]) >= 0
        assert 0 <= float(r["jsd_blend"]) <= np.log(2)
    path = tmp_path / "ablation.csv"
    write_csv(path, ABLATION_FIELDS, rows)
    with open(path) as f:
        got = list(csv.DictReader(f))
    assert [g["config_name"] for g in got] == [r["config_name"] for r in rows]
