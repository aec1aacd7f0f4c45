"""Procrustes metric, shape error, and the experiment report drivers."""

import json
from pathlib import Path

import numpy as np
import pytest
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from shape_evade import bodymodel as bm
from shape_evade import detector as det
from shape_evade import evaluation as ev
from shape_evade import synth
from shape_evade.attacks import AttackSpec
from shape_evade.errors import DegenerateGeometryError
from shape_evade.fitter import FitConfig

CKPT = Path(__file__).parent / "data" / "detector.ckpt"

# small but non-degenerate protocol for driver tests
FAST_FIT = FitConfig(restarts=1, max_outer_iters=25, robust=False,
                     lambda_shape=0.05)


def small_corpus(n=3, preset="calibration"):
    return synth.build_records(42, n, 1, (96, 96), preset)


def oracle_rms(fitted, truth, seed=0):
    """Numerical minimizer over rotation, positive scale, and translation."""
    fitted = np.asarray(fitted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)

    def cost(x):
        rot = Rotation.from_rotvec(x[:3]).as_matrix()
        s = np.exp(np.clip(x[3], -20.0, 20.0))
        moved = s * fitted @ rot.T + x[4:]
        return np.mean(np.sum((moved - truth) ** 2, axis=1))

    rng = np.random.default_rng(seed)
    best = np.inf
    starts = [np.zeros(7)]
    for _ in range(6):
        x0 = np.zeros(7)
        x0[:3] = rng.uniform(-np.pi, np.pi, 3) * 0.9
        x0[3] = rng.uniform(-1, 1)
        starts.append(x0)
    for x0 in starts:
        res = minimize(cost, x0, method="Nelder-Mead",
                       options={"xatol": 1e-12, "fatol": 1e-16,
                                "maxiter": 20000, "maxfev": 20000})
        best = min(best, res.fun)
    return float(np.sqrt(best))


# --------------------------------------------------------------------------
# Procrustes metric


def test_identical_sets_zero():
    pts = np.random.default_rng(0).normal(0, 20, (13, 3))
    assert ev.procrustes_error(pts, pts) <= 1e-12


def test_similarity_transform_removed():
    rng = np.random.default_rng(1)
    for seed in range(5):
        pts = rng.normal(0, 15, (10, 3))
        rot = Rotation.from_rotvec(rng.uniform(-2, 2, 3)).as_matrix()
        scale = rng.uniform(0.3, 3.0)
        shift = rng.uniform(-50, 50, 3)
        moved = scale * pts @ rot.T + shift
        assert ev.procrustes_error(moved, pts) <= 1e-9
        assert ev.procrustes_error(pts, moved) <= 1e-9


def test_matches_numerical_minimizer():
    rng = np.random.default_rng(2)
    for seed in range(4):
        base = rng.normal(0, 12, (8, 3))
        other = base + rng.normal(0, 3, base.shape)
        ours = ev.procrustes_error(other, base)
        ref = oracle_rms(other, base, seed)
        assert ours == pytest.approx(ref, abs=1e-6)
        assert ours <= ref + 1e-9  # closed form is the optimum


def test_reflection_not_allowed():
    rng = np.random.default_rng(3)
    pts = rng.normal(0, 10, (9, 3))
    mirrored = pts * np.array([-1.0, 1.0, 1.0])
    err = ev.procrustes_error(mirrored, pts)
    assert err > 0.5  # a reflection would align exactly; rotations cannot
    assert err == pytest.approx(oracle_rms(mirrored, pts), abs=1e-6)


def test_degenerate_sets_rejected():
    same = np.zeros((5, 3)) + 7.0
    good = np.random.default_rng(4).normal(0, 5, (5, 3))
    with pytest.raises(DegenerateGeometryError):
        ev.procrustes_error(same, good)
    with pytest.raises(DegenerateGeometryError):
        ev.procrustes_error(good, same)
    line = np.outer(np.linspace(0, 10, 5), [1.0, 2.0, -1.0])
    with pytest.raises(DegenerateGeometryError):
        ev.procrustes_error(line, good)


def test_shape_validation():
    good = np.random.default_rng(5).normal(0, 5, (6, 3))
    with pytest.raises(ValueError):
        ev.procrustes_error(good[:, :2], good[:, :2])
    with pytest.raises(ValueError):
        ev.procrustes_error(good[:4], good)
    bad = good.copy()
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        ev.procrustes_error(bad, good)


# --------------------------------------------------------------------------
# Shape error


def test_shape_error_identity():
    beta = bm.ShapeParams(np.array([1.0, -0.5, 2.0, 0.3, -1.2, 0.7]))
    assert ev.shape_error(beta, beta) <= 1e-12


def test_height_only_difference_vanishes():
    # the height component scales every bone, so rest joints are a uniform
    # scaling about the pelvis and similarity alignment absorbs it completely
    for h in (-2.0, 0.8, 2.5):
        beta = np.zeros(6)
        beta[0] = h
        err = ev.shape_error(bm.ShapeParams(beta), bm.ShapeParams())
        assert err <= 1e-9


def test_shape_error_matches_rest_joint_alignment():
    a = bm.ShapeParams(np.array([0.5, 1.5, -1.0, 2.0, -0.5, 1.0]))
    b = bm.ShapeParams(np.array([-1.0, 0.2, 0.4, -0.3, 1.8, -2.0]))
    ja = bm.observable(bm.rest_joints(a))
    jb = bm.observable(bm.rest_joints(b))
    direct = ev.procrustes_error(ja, jb)
    assert ev.shape_error(a, b) == direct
    assert direct == pytest.approx(oracle_rms(ja, jb), abs=1e-6)


# --------------------------------------------------------------------------
# Report type


def make_report():
    rows = (ev.ReportRow("synthetic", (2.0, 3.0, 4.0)),)
    return ev.EvalReport(("a", "b", "c"), rows, 2.0, 5, "cafe0123")


def test_percent_increase_recomputable():
    rep = make_report()
    np.testing.assert_allclose(rep.percent_increase("synthetic"),
                               [0.0, 50.0, 100.0])
    assert rep.average_cm("synthetic") == pytest.approx(3.0)
    assert rep.mean_increase("synthetic") == pytest.approx(50.0)


def test_report_validation():
    with pytest.raises(ValueError):
        ev.EvalReport(("a", "b"), (ev.ReportRow("x", (1.0,)),), 1.0, 1, "00")
    rep = make_report()
    with pytest.raises(KeyError):
        rep.row("nope")
    zero = ev.EvalReport(("a",), (ev.ReportRow("x", (1.0,)),), 0.0, 1, "00")
    with pytest.raises(ValueError):
        zero.percent_increase("x")


def test_csv_layout():
    rep = make_report()
    lines = rep.csv_text().splitlines()
    assert lines[0] == "attack,a,b,c,average,baseline"
    cells = lines[1].split(",")
    assert cells[0] == "synthetic"
    assert float(cells[-1]) == 2.0
    assert float(cells[-2]) == 3.0
    footers = [ln for ln in lines if ln.startswith("#")]
    assert any("orderings" in ln for ln in footers)


def test_json_summary_recomputable():
    rep = make_report()
    payload = json.loads(rep.json_text())
    row = payload["rows"][0]
    base = payload["baseline_cm"]
    for err, inc in zip(row["errors_cm"], row["percent_increase"]):
        assert inc == pytest.approx(100.0 * (err - base) / base)


def test_merge_reports():
    a = make_report()
    b = ev.EvalReport(("a", "b", "c"),
                      (ev.ReportRow("adversarial", (3.0, 3.0, 3.0)),),
                      2.0, 5, "beef4567")
    merged = ev.merge_reports([a, b])
    assert [r.label for r in merged.rows] == ["synthetic", "adversarial"]
    assert merged.baseline_cm == 2.0
    with pytest.raises(ValueError):
        ev.merge_reports([])
    c = ev.EvalReport(("x", "y", "z"), b.rows, 2.0, 5, "feed")
    with pytest.raises(ValueError):
        ev.merge_reports([a, c])
    d = ev.EvalReport(("a", "b", "c"), b.rows, 9.0, 5, "feed")
    with pytest.raises(ValueError):
        ev.merge_reports([a, d])


# --------------------------------------------------------------------------
# Drivers


def test_removal_report_layout_and_baseline():
    corpus = small_corpus(3)
    rep = ev.run_synthetic_removal(corpus, FAST_FIT)
    assert rep.columns == tuple(bm.KEYPOINT_NAMES)
    assert len(rep.rows) == 1 and rep.rows[0].label == "synthetic"
    assert rep.subject_count == 3
    assert rep.baseline_cm > 0
    assert all(np.isfinite(rep.rows[0].errors_cm))
    # the unattacked fit is the baseline: recomputing it changes nothing
    again = ev.baseline_errors(corpus, FAST_FIT)
    assert rep.baseline_cm == float(np.mean(again))


def test_flip_rejects_self_pair():
    corpus = small_corpus(1)
    with pytest.raises(ValueError):
        ev.run_synthetic_flip(corpus, FAST_FIT, pairs=[("left_knee", "left_knee")])
    with pytest.raises(ValueError):
        ev.run_synthetic_flip(corpus, FAST_FIT, pairs=[])


def test_default_pairs_cover_reported_flips():
    names = [frozenset(p) for p in ev.DEFAULT_FLIP_PAIRS]
    assert frozenset(("head_top", "right_hip")) in names
    assert frozenset(("right_elbow", "right_knee")) in names
    assert frozenset(("right_knee", "left_knee")) in names


def test_flip_report_columns():
    corpus = small_corpus(2)
    rep = ev.run_synthetic_flip(corpus, FAST_FIT,
                                pairs=[("head_top", "right_hip"), (1, 4)])
    assert rep.columns == ("head_top-right_hip", "right_knee-left_knee")
    assert all(e > 0 for e in rep.rows[0].errors_cm)


def test_baseline_identical_across_drivers():
    corpus = small_corpus(2)
    rem = ev.run_synthetic_removal(corpus, FAST_FIT)
    flp = ev.run_synthetic_flip(corpus, FAST_FIT, pairs=[(0, 5)])
    assert rem.baseline_cm == flp.baseline_cm


def test_removal_report_deterministic():
    corpus = small_corpus(2)
    a = ev.run_synthetic_removal(corpus, FAST_FIT)
    b = ev.run_synthetic_removal(corpus, FAST_FIT)
    assert a.csv_text() == b.csv_text()
    assert a.json_text() == b.json_text()


def test_adversarial_driver_records_budgets():
    weights = det.load_checkpoint(CKPT)
    corpus = small_corpus(2)
    spec = AttackSpec.remove(bm.KEYPOINT_INDEX["right_hip"], max_iters=40)
    rep = ev.run_adversarial(corpus, weights, [spec], FAST_FIT)
    assert rep.columns == ("right_hip",)
    row = rep.rows[0]
    assert row.label == "adversarial"
    assert row.budget_linf_max[0] <= spec.epsilon + 1e-12
    assert 0.0 <= row.attack_success[0] <= 1.0
    assert row.budget_mse[0] > 0
    assert rep.baseline_cm == ev.run_synthetic_removal(corpus, FAST_FIT).baseline_cm
    with pytest.raises(ValueError):
        ev.run_adversarial(corpus, weights, [], FAST_FIT)
