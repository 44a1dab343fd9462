import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

import oracles
from deconfound import evaluation as E


def test_uar_hand_example():
    cm = E.ConfusionMatrix([[8, 2, 0], [1, 3, 0], [0, 5, 5]])
    assert E.uar(cm) == pytest.approx((0.8 + 0.75 + 0.5) / 3, abs=1e-15)
    assert np.allclose(cm.row_percent()[0], [80, 20, 0])


def test_uar_recall_example():
    assert E.uar_from_labels([0, 0, 1, 1, 2, 2], [0, 1, 1, 1, 2, 0], 3) == pytest.approx(2 / 3, abs=1e-15)
    assert E.uar(E.ConfusionMatrix(np.diag([3, 4, 5]))) == 1.0


def test_confusion_delta_single_move():
    base = np.array([[10, 0, 0], [0, 10, 0], [0, 0, 10]])
    moved = base.copy()
    moved[1] = [0, 9, 1]
    d = E.confusion_delta(E.ConfusionMatrix(base), E.ConfusionMatrix(moved))
    assert np.allclose(d[1], [0, -10, 10]) and np.all(d[[0, 2]] == 0)


def test_uar_missing_class():
    cm = E.ConfusionMatrix.from_labels([0, 0, 1], [0, 1, 1], 3)
    with pytest.raises(E.EvaluationError):
        E.uar(cm)
    assert E.uar(cm, present_only=True) == 0.75
    assert E.chance_level([0, 0, 1]) == 0.5


@given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=40))
def test_uar_matches_brute_force(pairs):
    y, p = zip(*pairs)
    assert E.uar_from_labels(y, p, 3, present_only=True) == oracles.uar(y, p, 3)


def test_constant_predictor_is_chance():
    y = np.repeat([0, 1, 2], [5, 9, 30])
    for c in range(3):
        assert E.uar_from_labels(y, np.full(len(y), c), 3) == pytest.approx(1 / 3, abs=1e-15)


def test_confusion_delta():
    y = np.array([0, 0, 1, 1, 2, 2])
    pn = np.array([0, 1, 1, 1, 0, 2])
    pa = np.array([0, 0, 1, 0, 2, 2])
    d = E.confusion_delta(E.ConfusionMatrix.from_labels(y, pn, 3), E.ConfusionMatrix.from_labels(y, pa, 3))
    assert np.allclose(d, [[50, -50, 0], [50, -50, 0], [-50, 0, 50]])
    assert np.allclose(d.sum(axis=1), 0)
    yy, nn, aa = np.tile(y, 2), np.tile(pn, 2), np.concatenate([pa, pn])
    by = E.confusion_delta_by_group(yy, nn, aa, ["lo"] * 6 + ["hi"] * 6)
    assert np.allclose(by["lo"], d) and np.all(by["hi"] == 0)
    with pytest.raises(E.EvaluationError, match="no samples"):
        E.confusion_delta_by_group(y, pn, pa, ["a", "a", "a", "b", "b", "b"])
    with pytest.raises(E.EvaluationError):
        E.confusion_delta(E.ConfusionMatrix(np.eye(3)), E.ConfusionMatrix(np.eye(2)))


@pytest.mark.parametrize("a,b,x", [(0.5, 0.5, 0.3), (2.0, 3.5, 0.9), (10.0, 0.5, 0.99), (0.5, 40.0, 0.01),
                                   (19.5, 0.5, 0.2), (3.0, 3.0, 0.5)])
def test_incomplete_beta_against_mpmath(a, b, x):
    ref = float(mpmath.betainc(a, b, 0, x, regularized=True))
    assert E.betainc_reg(a, b, x) == pytest.approx(ref, rel=1e-12, abs=1e-300)


@pytest.mark.parametrize("stat,dof", [(0.1, 1), (3.84, 1), (9.49, 4), (30.0, 4), (2.0, 7), (150.0, 9)])
def test_chi2_sf_against_scipy(stat, dof):
    assert E.chi2_sf(stat, dof) == pytest.approx(stats.chi2.sf(stat, dof), rel=1e-10)


def test_paired_t_test_against_scipy():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 30))
        a = rng.normal(size=n)
        b = a + rng.normal(loc=rng.normal(), size=n)
        r = E.paired_t_test(a, b)
        ref = stats.ttest_rel(a, b)
        assert r.t == pytest.approx(ref.statistic, rel=1e-10)
        assert r.p == pytest.approx(ref.pvalue, rel=1e-9, abs=1e-14)
        assert r.df == n - 1


def test_paired_t_test_errors_and_one_sided():
    with pytest.raises(E.DegenerateTestError):
        E.paired_t_test([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])
    with pytest.raises(E.EvaluationError):
        E.paired_t_test([1.0], [0.0])
    a, b = [0.5, 0.6, 0.7, 0.65], [0.4, 0.55, 0.6, 0.66]
    ref = stats.ttest_rel(a, b, alternative="greater").pvalue
    assert E.one_sided_paired_p(a, b) == pytest.approx(ref, rel=1e-9)


def test_pearson_against_scipy():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(3, 40))
        x = rng.normal(size=n)
        y = rng.uniform(-1, 1) * x + rng.normal(size=n)
        ref = stats.pearsonr(x, y)
        r = E.pearson_r(x, y)
        assert r == pytest.approx(ref.statistic, abs=1e-12)
        assert E.pearson_p(r, n) == pytest.approx(ref.pvalue, rel=1e-8, abs=1e-14)


def test_pearson_undefined():
    with pytest.raises(E.UndefinedCorrelationError):
        E.pearson_r([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])
    assert E.pearson_p(1.0, 10) == 0.0


@given(st.lists(st.floats(0, 1), min_size=1, max_size=25))
def test_bh_matches_brute_force(p):
    got = E.bh_adjust(p)
    ref = oracles.bh(p)
    assert np.allclose(got, ref, rtol=0, atol=1e-12)
    assert np.all(got >= np.asarray(p) - 1e-15)


def test_bh_against_scipy():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = rng.uniform(size=int(rng.integers(1, 30))) ** 3
        assert np.allclose(E.bh_adjust(p), stats.false_discovery_control(p), rtol=0, atol=1e-12)
    with pytest.raises(E.EvaluationError):
        E.bh_adjust([0.2, 1.2])
    assert E.bh_adjust([]).shape == (0,)


@pytest.mark.parametrize("p,code", [(0.0099, "**"), (0.01, "*"), (0.0499, "*"), (0.05, "-"), (0.0999, "-"),
                                    (0.1, ""), (float("nan"), "n/a"), (None, "n/a")])
def test_significance_codes(p, code):
    assert E.significance_code(p) == code


@given(st.lists(st.tuples(st.booleans(), st.booleans()), min_size=1, max_size=20))
def test_aps_matches_brute_force(pairs):
    a, n = zip(*pairs)
    rec = E.aps(a, n, "x")
    assert rec.aps == oracles.aps(a, n)
    assert -1.0 <= rec.aps <= 1.0 and rec.runs == len(pairs)


def test_aps_run_count_mismatch():
    with pytest.raises(E.EvaluationError):
        E.aps([True] * 15, [True] * 14)


def test_aps_from_predictions():
    y = [0, 1, 2]
    adv = [[0, 1, 0], [0, 0, 2]]
    nor = [[1, 1, 0], [1, 1, 0]]
    recs = E.aps_from_predictions(y, adv, nor, ["a", "b", "c"])
    assert [r.aps for r in recs] == [1.0, -0.5, 0.5]


def test_correlation_report_shape_and_undefined():
    rng = np.random.default_rng(3)
    ids = [f"s{i}" for i in range(60)]
    aps_vals = rng.uniform(-1, 1, 60)
    recs = [E.ApsRecord(i, 0, 0, 15, float(v)) for i, v in zip(ids, aps_vals)]
    feats = {i: np.array([v + 0.1 * rng.normal(), 0.0, rng.normal()]) for i, v in zip(ids, aps_vals)}
    rows = E.aps_correlation_report(recs, feats, ["tracks", "constant", "noise"])
    assert [r.feature for r in rows] == ["tracks", "constant", "noise"]
    assert rows[0].r > 0.9 and rows[0].code == "**"
    assert not rows[1].defined and rows[1].code == "n/a" and rows[1].r is None
    raw = [rows[0].p_raw, rows[2].p_raw]
    assert np.allclose([rows[0].p_adjusted, rows[2].p_adjusted], E.bh_adjust(raw))
    assert "undef" in E.format_correlation_table(rows)
    with pytest.raises(E.EvaluationError):
        E.aps_correlation_report(recs, {}, ["x"])


def probs_from_preds(pred, n=3, sharp=0.9):
    out = np.full((len(pred), n), (1 - sharp) / (n - 1))
    out[np.arange(len(pred)), pred] = sharp
    return out


def test_compare_on_target_signs():
    rng = np.random.default_rng(4)
    y = rng.integers(0, 3, 300)
    speakers = [f"s{i % 10}" for i in range(300)]
    good = [probs_from_preds(np.where(rng.random(300) < 0.8, y, rng.integers(0, 3, 300))) for _ in range(3)]
    bad = [probs_from_preds(np.where(rng.random(300) < 0.4, y, rng.integers(0, 3, 300))) for _ in range(3)]
    rep = E.compare_on_target(bad, good, y, speakers)
    assert rep.delta > 0.2 and rep.test.p < 0.05 and not rep.sign_indeterminate
    same = E.compare_on_target(good, good, y, speakers)
    assert same.delta == 0.0 and same.sign_indeterminate
    assert "no significance test" in same.notes[0]
    one = E.compare_on_target(bad, good, y, ["solo"] * 300)
    assert "paired unit: seed" in one.notes
    d = rep.to_dict()
    assert d["normal_seed_uars"] == rep.normal.seed_uars and d["p"] == rep.test.p


def test_t_sf_limits():
    assert E.t_sf_two_sided(0.0, 5) == pytest.approx(1.0, abs=1e-15)
    assert E.t_sf_two_sided(math.inf, 5) == 0.0
    assert E.t_sf_two_sided(-2.0, 10) == E.t_sf_two_sided(2.0, 10)


@settings(max_examples=50)
@given(st.floats(0.05, 60), st.integers(1, 80))
def test_t_sf_against_scipy(t, df):
    assert E.t_sf_two_sided(t, df) == pytest.approx(2 * stats.t.sf(t, df), rel=1e-9, abs=1e-300)
