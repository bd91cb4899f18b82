import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit, logit

from mscalib import aalen_johansen as aj
from mscalib import calibration as cal
from mscalib import dgm, ipcw, truth
from mscalib.errors import BootstrapUnstable, DivergedToInfinity, FitSingular, GroupTooSmall, MscalibError
from mscalib.msm_data import PredictionMatrix, indicator_matrix

from conftest import random_cohort

T = 1.0


def random_preds(n, K, rng, horizon=T):
    p = rng.dirichlet(np.ones(K), size=n)
    return PredictionMatrix(horizon, p)


def binary_preds(p, horizon=T):
    p = np.asarray(p, dtype=float)
    return PredictionMatrix(horizon, np.column_stack([1 - p, p]))


def binary_indicators(y):
    y = np.asarray(y, dtype=float)
    return np.column_stack([1 - y, y])


@pytest.fixture(scope="module")
def uncensored(illness_death):
    rng = np.random.default_rng(21)
    cohort = random_cohort(illness_death, 300, rng, censor_rate=0)
    return cohort, random_preds(300, 3, rng)


@pytest.fixture(scope="module")
def nic_truth(nic_cohort):
    config, cohort = nic_cohort
    preds = truth.true_predictions(config, cohort, dgm.HORIZON_DAYS)
    weights = ipcw.estimated_weights(cohort, dgm.HORIZON_DAYS, cap=math.inf)
    return config, cohort, preds, weights


class TestPseudoValues:
    def test_formula(self):
        # within one group of size m: m * full - (m - 1) * leave-one-out
        m, full, loo = 5, 0.4, 0.35
        assert m * full - (m - 1) * loo == pytest.approx(0.6)

    @pytest.mark.parametrize("groups", [1, 4, 10])
    def test_uncensored_collapse_to_indicators(self, uncensored, groups):
        cohort, preds = uncensored
        pv = cal.pseudo_values(cohort, preds, T, groups)
        _, ind = indicator_matrix(cohort, T)
        np.testing.assert_allclose(pv.values, ind, atol=1e-12)

    def test_single_group_jackknife_mean(self, illness_death):
        rng = np.random.default_rng(22)
        cohort = random_cohort(illness_death, 1000, rng, censor_rate=0.6)
        preds = random_preds(1000, 3, rng)
        pv = cal.pseudo_values(cohort, preds, T, 1)
        full = aj.aalen_johansen(cohort, T).probs
        np.testing.assert_allclose(pv.values.mean(axis=0), full, atol=0.02)

    def test_group_too_small(self, illness_death):
        rng = np.random.default_rng(23)
        cohort = random_cohort(illness_death, 10, rng)
        with pytest.raises(GroupTooSmall):
            cal.pseudo_values(cohort, random_preds(10, 3, rng), T, 6)

    def test_mean_and_slope_identities(self, uncensored):
        cohort, preds = uncensored
        p = preds.probs
        same = cal.PseudoValueMatrix(p.copy(), ())
        double = cal.PseudoValueMatrix(2 * p, ())
        for k in (1, 2, 3):
            assert cal.pv_mean(same, preds, k) == pytest.approx(0, abs=1e-15)
            assert cal.pv_weak(same, preds, k) == pytest.approx(1)
            assert cal.pv_weak(double, preds, k) == pytest.approx(2)
        pv = cal.pseudo_values(cohort, preds, T, 5)
        _, ind = indicator_matrix(cohort, T)
        for k in (1, 2, 3):
            assert cal.pv_mean(pv, preds, k) == pytest.approx(ind[:, k - 1].mean() - p[:, k - 1].mean(), abs=1e-12)

    def test_constant_pseudo_values_flat(self, uncensored):
        _, preds = uncensored
        pv = cal.PseudoValueMatrix(np.full(preds.probs.shape, 0.3), ())
        res = cal.pv_moderate(pv, preds, 2)
        np.testing.assert_allclose(res.observed, 0.3, atol=1e-12)

    def test_pv_equals_unit_weight_blr_uncensored(self, uncensored):
        cohort, preds = uncensored
        pv = cal.pseudo_values(cohort, preds, T, 5)
        _, ind = indicator_matrix(cohort, T)
        w = np.ones(len(cohort))
        for k in (1, 2, 3):
            a = cal.pv_moderate(pv, preds, k)
            b = cal.blr_moderate(preds, ind, w, k)
            np.testing.assert_allclose(np.clip(a.observed, 0, 1), b.observed, atol=1e-9)
            np.testing.assert_array_equal(a.predicted, b.predicted)


class TestBlr:
    def test_zero_indicators_give_zero_curve(self):
        rng = np.random.default_rng(0)
        preds = binary_preds(rng.uniform(0.05, 0.95, 200))
        res = cal.blr_moderate(preds, binary_indicators(np.zeros(200)), np.ones(200), 2)
        np.testing.assert_allclose(res.observed, 0, atol=1e-12)
        assert any("mean" in n for n in res.notes)
        with pytest.raises(DivergedToInfinity):
            cal.blr_mean(preds, binary_indicators(np.zeros(200)), np.ones(200), 2)

    def test_weight_doubling_invariance(self):
        rng = np.random.default_rng(1)
        p = rng.uniform(0.05, 0.95, 300)
        y = rng.uniform(size=300) < p
        w = rng.uniform(1, 3, 300)
        a = cal.blr_moderate(binary_preds(p), binary_indicators(y), w, 2)
        b = cal.blr_moderate(binary_preds(p), binary_indicators(y), 2 * w, 2)
        np.testing.assert_allclose(a.observed, b.observed, atol=1e-12)
        assert a.mean_calibration == pytest.approx(b.mean_calibration, abs=1e-10)

    def test_mean_closed_form(self):
        preds = binary_preds(np.full(100, 0.5))
        y = np.tile([0.0, 1.0], 50)
        assert cal.blr_mean(preds, binary_indicators(y), np.ones(100), 2) == pytest.approx(0, abs=1e-12)

    def test_mean_sign_under_prediction(self):
        rng = np.random.default_rng(2)
        p = rng.uniform(0.05, 0.95, 5000)
        y = rng.uniform(size=5000) < p
        under = binary_preds(expit(logit(p) - 0.5))
        assert cal.blr_mean(under, binary_indicators(y), np.ones(5000), 2) > 0.05

    def test_slope_near_one(self):
        rng = np.random.default_rng(3)
        p = expit(rng.normal(0, 1.5, 20000))
        y = rng.uniform(size=20000) < p
        a, b = cal.blr_weak(binary_preds(p), binary_indicators(y), np.ones(20000), 2)
        assert abs(b - 1) < 0.05
        assert abs(a) < 0.05

    def test_overfit_slope_half(self):
        rng = np.random.default_rng(4)
        p = expit(rng.normal(0, 1.5, 20000))
        y = rng.uniform(size=20000) < p
        _, b = cal.blr_weak(binary_preds(expit(2 * logit(p))), binary_indicators(y), np.ones(20000), 2)
        assert abs(b - 0.5) < 0.03

    def test_constant_prediction_singular(self):
        preds = binary_preds(np.full(50, 0.3))
        y = np.tile([0.0, 1.0], 25)
        with pytest.raises(FitSingular):
            cal.blr_weak(preds, binary_indicators(y), np.ones(50), 2)

    def test_nan_weights_exclude(self):
        rng = np.random.default_rng(5)
        p = rng.uniform(0.1, 0.9, 100)
        y = rng.uniform(size=100) < p
        w = np.ones(100)
        w[::4] = np.nan
        res = cal.blr_moderate(binary_preds(p), binary_indicators(y), w, 2)
        assert res.predicted.size == 75
        assert np.all(np.diff(res.predicted) >= 0)


class TestMlr:
    def test_log_ratios(self):
        np.testing.assert_allclose(cal.log_ratios([[0.7, 0.2, 0.1]])[0], [-1.2528, -1.9459], atol=1e-4)

    def test_rows_sum_to_one(self, nic_truth):
        _, cohort, preds, weights = nic_truth
        _, ind = indicator_matrix(cohort, preds.horizon)
        fit = cal.mlr_fit(preds, ind, weights)
        np.testing.assert_allclose(fit.observed.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((fit.observed > 0) & (fit.observed < 1))
        res = cal.mlr_moderate(preds, ind, weights)
        assert all(res[k].predicted.size == fit.included.sum() for k in res)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_two_states_match_blr(self, seed):
        rng = np.random.default_rng(seed)
        n = 500
        p = rng.uniform(0.05, 0.95, n)
        y = rng.uniform(size=n) < expit(logit(p) + 0.3)
        w = rng.uniform(1, 2, n)
        w[rng.uniform(size=n) < 0.2] = np.nan
        m = cal.mlr_mean(binary_preds(p), binary_indicators(y), w)
        b = cal.blr_mean(binary_preds(p), binary_indicators(y), w, 2)
        assert m[1] == pytest.approx(b, abs=1e-8)
        assert m.sum() == pytest.approx(0, abs=1e-12)

    def test_means_sum_to_zero(self, uncensored):
        cohort, preds = uncensored
        _, ind = indicator_matrix(cohort, T)
        assert cal.mlr_mean(preds, ind, np.ones(len(cohort))).sum() == pytest.approx(0, abs=1e-12)

    def test_weak_slopes_near_one(self):
        rng = np.random.default_rng(6)
        n = 20000
        eta = np.column_stack([np.zeros(n), rng.normal(0, 1, n), rng.normal(-0.5, 1, n)])
        p = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
        cat = (rng.uniform(size=n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        ind = np.eye(3)[cat]
        a, b = cal.mlr_weak(PredictionMatrix(T, p), ind, np.ones(n))
        np.testing.assert_allclose(b, 1, atol=0.05)
        np.testing.assert_allclose(a, 0, atol=0.05)


class TestAssess:
    def test_aj_points_and_mean(self, nic_truth):
        _, cohort, preds, _ = nic_truth
        res = cal.assess("AJ", cohort, preds, n_groups=10)
        for k, r in res.items():
            assert r.predicted.size == 10
            assert np.mean(r.observed - r.predicted) == pytest.approx(r.mean_calibration, abs=1e-12)

    @pytest.mark.parametrize("method", ["PV", "BLR", "MLR"])
    def test_mean_moderate_consistency(self, nic_truth, method):
        _, cohort, preds, weights = nic_truth
        res = cal.assess(method, cohort, preds, weights)
        for k, r in res.items():
            assert len(r.points) == r.predicted.size
            assert np.all(np.diff(r.predicted) >= 0)
            assert abs(np.mean(r.observed - r.predicted) - r.mean_calibration) < 0.01

    def test_over_prediction_lowers_mean(self, nic_truth):
        _, cohort, preds, weights = nic_truth
        over = dgm.miscalibrate(preds, 0.5)
        for method in cal.METHODS:
            a = cal.assess(method, cohort, preds, weights, moderate=False)
            b = cal.assess(method, cohort, over, weights, moderate=False)
            for k in a:
                assert b[k].mean_calibration < a[k].mean_calibration

    def test_weights_required(self, uncensored):
        cohort, preds = uncensored
        with pytest.raises(ValueError):
            cal.assess("BLR", cohort, preds)
        with pytest.raises(ValueError):
            cal.assess("XYZ", cohort, preds, np.ones(len(cohort)))


class TestBootstrap:
    def test_constant_statistic(self):
        se = cal.bootstrap_se(lambda idx: np.array([1.0, 2.0]), 30, 50, 1)
        np.testing.assert_array_equal(se, [0.0, 0.0])

    def test_sample_mean(self):
        x = np.random.default_rng(7).normal(0, 2, 400)
        se = cal.bootstrap_se(lambda idx: x[idx].mean(), 400, 500, 3)
        assert se[0] == pytest.approx(x.std(ddof=1) / 20, rel=0.15)

    def test_deterministic(self):
        x = np.random.default_rng(8).uniform(size=100)
        a = cal.bootstrap_se(lambda idx: x[idx].mean(), 100, 60, 9)
        b = cal.bootstrap_se(lambda idx: x[idx].mean(), 100, 60, 9)
        np.testing.assert_array_equal(a, b)

    def test_unstable(self):
        def flaky(idx):
            if idx[0] % 2:
                raise MscalibError("fail")
            return 0.0

        with pytest.raises(BootstrapUnstable):
            cal.bootstrap_se(flaky, 100, 60, 1)
        with pytest.raises(ValueError):
            cal.bootstrap_se(lambda i: 0.0, 10, 49, 1)

    def test_cohort_statistic_runs(self, illness_death):
        rng = np.random.default_rng(9)
        cohort = random_cohort(illness_death, 200, rng)
        preds = random_preds(200, 3, rng)
        stat = cal.mean_calibration_statistic("AJ", cohort, preds, n_groups=5)
        se = cal.bootstrap_se(stat, 200, 50, 4)
        assert se.shape == (3,) and np.all(se > 0)
