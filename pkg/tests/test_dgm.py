import math

import numpy as np
import pytest
from scipy import stats

from mscalib import dgm
from mscalib.msm_data import PredictionMatrix, TransitionStructure, to_long_format

T = dgm.HORIZON_DAYS


@pytest.fixture(scope="module")
def config():
    return dgm.dgm1_config()


def test_scenarios():
    assert dgm.Scenario.named("nic").beta_cens == (0.0, 0.0)
    assert dgm.Scenario.named("WIC").beta_cens == (0.25, -0.25)
    assert dgm.Scenario.named("sic").beta_cens == (1.0, -1.0)
    with pytest.raises(ValueError):
        dgm.Scenario.named("xic")


def test_json_round_trip(config):
    cfg = config.with_scenario(dgm.Scenario.named("SIC"))
    assert dgm.DgmConfig.from_json(cfg.to_json()) == cfg
    no_cens = dgm.DgmConfig(cfg.structure, cfg.scale, lambda_cens=math.inf)
    assert math.isinf(dgm.DgmConfig.from_json(no_cens.to_json()).lambda_cens)


def test_config_validation(config):
    with pytest.raises(ValueError):
        dgm.DgmConfig(config.structure, {(1, 2): 1.0})
    bad = dict(config.scale)
    bad[(1, 2)] = -1.0
    with pytest.raises(ValueError):
        dgm.DgmConfig(config.structure, bad)


@pytest.mark.parametrize("key,survival", [((1, 2), 0.9), ((1, 3), 0.8), ((1, 5), 0.99), ((2, 4), 0.55),
                                          ((2, 5), 0.95), ((3, 4), 0.7), ((3, 5), 0.15), ((4, 5), 0.05)])
def test_cause_specific_targets(config, key, survival):
    # each transition alone at z = 0 reaches its targeted survival at the horizon
    cfg = dgm.DgmConfig(TransitionStructure(2, [(1, 2)]), {(1, 2): config.scale[key]}, lambda_cens=math.inf)
    n = 50000
    states, times = dgm.simulate_paths(cfg, np.zeros((n, 2)), np.random.default_rng(hash(key) % 2**32))
    frac = np.mean(times[:, 1] > T)
    assert frac == pytest.approx(survival, abs=max(0.01, 3 * math.sqrt(survival * (1 - survival) / n)))


def test_nic_censoring_probability(config):
    Z, C, _, _ = dgm.simulate_arrays(config, 50000, 3)
    assert np.mean(C < T) == pytest.approx(0.4, abs=0.01)
    # advisory: censoring independent of covariates under NIC
    lo = Z[:, 0] < np.median(Z[:, 0])
    assert stats.ks_2samp(C[lo], C[~lo]).pvalue > 0.01


def test_sic_censoring_depends_on_covariates(config):
    cfg = config.with_scenario(dgm.Scenario.named("SIC"))
    Z, C, _, _ = dgm.simulate_arrays(cfg, 20000, 3)
    hi = Z[:, 0] - Z[:, 1] > 0
    assert np.median(C[hi]) < np.median(C[~hi])


def test_deterministic_and_block_stable(config):
    a = dgm.simulate_cohort(config, None, 500, 7)
    b = dgm.simulate_cohort(config, None, 500, 7)
    assert to_long_format(a) == to_long_format(b)
    # complete blocks do not depend on the total size
    one = dgm.simulate_cohort(config, None, dgm.BLOCK_SIZE, 7)
    two = dgm.simulate_cohort(config, None, dgm.BLOCK_SIZE + 10, 7)
    assert to_long_format(two.take(range(dgm.BLOCK_SIZE))) == to_long_format(one)
    assert to_long_format(dgm.simulate_cohort(config, None, 500, 8)) != to_long_format(a)


def test_paths_respect_structure(config):
    cohort = dgm.simulate_cohort(config.with_scenario(dgm.Scenario.named("SIC")), None, 3000, 2)
    allowed = set(config.structure.transitions)
    for s in cohort.subjects:
        for (a, _), (b, _) in zip(s.path, s.path[1:]):
            assert (a, b) in allowed
        if s.censor_time is not None:
            assert s.path[-1][1] <= s.censor_time


def test_memoryless_from_state_two(config):
    # onward paths after entering state 2 match fresh paths started in state 2
    n = 40000
    cfg = dgm.DgmConfig(config.structure, config.scale, lambda_cens=math.inf)
    states, times = dgm.simulate_paths(cfg, np.zeros((n, 2)), np.random.default_rng(5))
    via2 = states[:, 1] == 2
    sojourn = times[via2, 2] - times[via2, 1]
    fresh = np.random.default_rng(6).exponential(1 / (1 / config.scale[(2, 4)] + 1 / config.scale[(2, 5)]), 20000)
    assert stats.ks_2samp(sojourn, fresh).pvalue > 0.001


class TestMiscalibrate:
    def test_closed_forms(self):
        p = PredictionMatrix(1.0, [[0.5, 0.5], [0.8, 0.2]])
        out = dgm.miscalibrate(p, 0.5)
        assert out.probs[0, 0] == pytest.approx(0.6225, abs=1e-4)
        assert out.probs[1, 1] == pytest.approx(0.2919, abs=1e-4)
        assert not out.row_normalized

    def test_identity(self):
        p = PredictionMatrix(1.0, [[0.3, 0.7]])
        np.testing.assert_array_equal(dgm.miscalibrate(p, 0.0).probs, p.probs)


class TestSuperpopulation:
    def test_full_sample_is_permutation(self, config):
        pop = dgm.superpopulation(config, None, 300, 4)
        sub = dgm.superpopulation_sample(config, None, 300, 300, 4, 0)
        assert sorted(s.path for s in sub.subjects) == sorted(s.path for s in pop.subjects)

    def test_index_properties(self):
        a = dgm.superpopulation_index(10000, 3000, 1, 0)
        b = dgm.superpopulation_index(10000, 3000, 1, 1)
        assert np.unique(a).size == 3000
        np.testing.assert_array_equal(a, dgm.superpopulation_index(10000, 3000, 1, 0))
        overlap = np.intersect1d(a, b).size
        assert overlap < 3000
        assert overlap == pytest.approx(3000 ** 2 / 10000, rel=0.15)
        with pytest.raises(ValueError):
            dgm.superpopulation_index(10, 11, 1, 0)
