import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from mscalib import smoothers as sm
from mscalib.errors import DivergedToInfinity, FitSingular, TooFewDistinct


def loess_oracle(x, y, w, span, degree, i):
    """Brute-force local fit at x[i] from explicit normal equations."""
    n = x.size
    q = math.ceil(span * n)
    d = np.abs(x - x[i])
    h = np.sort(d)[q - 1]
    k = np.where(d < h, (1 - (d / h) ** 3) ** 3, 0.0) * w
    X = np.vander(x - x[i], degree + 1, increasing=True)
    A = X.T @ (k[:, None] * X)
    b = X.T @ (k * y)
    return np.linalg.solve(A, b)[0]


class TestLoess:
    @pytest.mark.parametrize("degree", [1, 2])
    def test_reproduces_affine(self, degree):
        rng = np.random.default_rng(0)
        x = rng.uniform(0, 1, 300)
        fit = sm.loess(x, 2 * x + 1, span=0.3, degree=degree)
        np.testing.assert_allclose(fit.fitted, 2 * x + 1, atol=1e-10)

    def test_constant(self):
        x = np.random.default_rng(1).uniform(size=100)
        np.testing.assert_allclose(sm.loess(x, np.full(100, 0.37)).fitted, 0.37, atol=1e-12)

    @pytest.mark.parametrize("degree", [1, 2])
    def test_matches_normal_equations(self, degree):
        rng = np.random.default_rng(2)
        x = rng.uniform(0, 1, 150)
        y = np.sin(4 * x) + rng.normal(0, 0.1, 150)
        w = rng.uniform(0.5, 3, 150)
        fit = sm.loess(x, y, w, span=0.4, degree=degree)
        for i in (0, 17, 75, 149):
            assert fit.fitted[i] == pytest.approx(loess_oracle(x, y, w, 0.4, degree, i), abs=1e-10)

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(0.1, 100))
    def test_equivariance_and_weight_scale(self, seed, a, b, c):
        rng = np.random.default_rng(seed)
        x = rng.uniform(size=80)
        y = rng.uniform(size=80)
        w = rng.uniform(0.1, 2, size=80)
        base = sm.loess(x, y, w).fitted
        np.testing.assert_allclose(sm.loess(x, a * y + b, w).fitted, a * base + b, atol=1e-8)
        np.testing.assert_allclose(sm.loess(x, y, c * w).fitted, base, atol=1e-9)

    def test_tied_abscissae_share_fit(self):
        x = np.repeat(np.linspace(0, 1, 20), 3)
        y = np.random.default_rng(3).uniform(size=60)
        f = sm.loess(x, y).fitted.reshape(20, 3)
        np.testing.assert_array_equal(f[:, 0], f[:, 1])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            sm.loess([0.1, 0.2, 0.3], [1, 2, 3], degree=2, span=0.5)


class TestSplineBasis:
    def test_full_rank_and_shape(self):
        x = np.random.default_rng(0).normal(size=500)
        b = sm.natural_spline_basis(x, 4)
        assert b.basis.shape == (500, 4)
        assert np.linalg.matrix_rank(np.column_stack([np.ones(500), b.basis])) == 5

    def test_linear_in_span(self):
        x = np.random.default_rng(1).uniform(-2, 3, 200)
        B = np.column_stack([np.ones(200), sm.natural_spline_basis(x, 2).basis])
        coef, *_ = np.linalg.lstsq(B, 3 * x - 1, rcond=None)
        np.testing.assert_allclose(B @ coef, 3 * x - 1, atol=1e-9)

    def test_linear_beyond_boundary(self):
        x = np.random.default_rng(2).uniform(0, 1, 100)
        b = sm.natural_spline_basis(x, 4)
        rng = np.random.default_rng(9)
        coef = rng.normal(size=4)
        h = 1e-3
        for u in (-0.5, -0.2, 1.3, 2.0):
            f = b.evaluate(np.array([u - h, u, u + h])) @ coef
            assert abs(f[0] - 2 * f[1] + f[2]) / h ** 2 < 1e-8 * max(1, np.abs(f).max()) / h ** 2 + 1e-6

    def test_too_few_distinct(self):
        with pytest.raises(TooFewDistinct):
            sm.natural_spline_basis(np.array([0.0, 1.0, 2.0, 1.0, 0.0]), 4)


def _fd_gradient(f, beta, h=1e-6):
    g = np.zeros_like(beta)
    for j in range(beta.size):
        e = np.zeros_like(beta)
        e[j] = h
        g[j] = (f(beta + e) - f(beta - e)) / (2 * h)
    return g


class TestLogistic:
    def test_closed_form_intercepts(self):
        y = np.array([1, 0, 0, 0] * 25, dtype=float)
        fit = sm.weighted_logistic(np.ones((100, 1)), y)
        assert fit.coef[0] == pytest.approx(math.log(1 / 3), abs=1e-9)
        fit = sm.weighted_logistic(np.ones((100, 1)), np.tile([0.0, 1.0], 50))
        assert fit.coef[0] == pytest.approx(0.0, abs=1e-12)

    def test_separation(self):
        with pytest.raises(DivergedToInfinity):
            sm.weighted_logistic(np.ones((10, 1)), np.ones(10))
        x = np.linspace(-1, 1, 40)
        with pytest.raises(DivergedToInfinity):
            sm.weighted_logistic(np.column_stack([np.ones(40), x]), (x > 0).astype(float))

    def test_rank_deficient(self):
        with pytest.raises(FitSingular):
            sm.weighted_logistic(np.ones((20, 2)), np.tile([0.0, 1.0], 10))

    def test_replication_equivalence(self):
        rng = np.random.default_rng(4)
        X = np.column_stack([np.ones(60), rng.normal(size=60)])
        y = rng.integers(0, 2, 60).astype(float)
        m = rng.integers(1, 4, 60)
        a = sm.weighted_logistic(X, y, m.astype(float))
        b = sm.weighted_logistic(np.repeat(X, m, axis=0), np.repeat(y, m))
        np.testing.assert_allclose(a.coef, b.coef, atol=1e-9)

    def test_gradient_at_solution(self):
        rng = np.random.default_rng(5)
        X = np.column_stack([np.ones(500), rng.normal(size=(500, 2))])
        y = (rng.uniform(size=500) < expit(X @ [0.2, 1.0, -0.5])).astype(float)
        w = rng.uniform(0.5, 2, 500)
        off = rng.normal(0, 0.3, 500)
        fit = sm.weighted_logistic(X, y, w, off)
        assert np.max(np.abs(fit.gradient)) < 1e-8

        def loglik(b):
            eta = X @ b + off
            return np.sum(w * (y * eta - np.logaddexp(0, eta)))

        probe = fit.coef + 0.1
        analytic = X.T @ (w * (y - expit(X @ probe + off)))
        np.testing.assert_allclose(_fd_gradient(loglik, probe), analytic, rtol=1e-5)


class TestMultinomial:
    def test_closed_form_intercepts(self):
        y = np.repeat([1, 2, 3], [50, 30, 20])
        fit = sm.weighted_multinomial([np.ones((100, 1))] * 2, y)
        np.testing.assert_allclose([c[0] for c in fit.coef], [math.log(0.6), math.log(0.4)], atol=1e-9)

    def test_two_categories_match_logistic(self):
        rng = np.random.default_rng(6)
        X = np.column_stack([np.ones(300), rng.normal(size=300)])
        y = (rng.uniform(size=300) < expit(X @ [0.3, 0.8])).astype(int)
        w = rng.uniform(0.5, 2, 300)
        off = rng.normal(0, 0.2, 300)
        a = sm.weighted_logistic(X, y, w, off)
        b = sm.weighted_multinomial([X], y + 1, w, [off])
        np.testing.assert_allclose(b.coef[0], a.coef, atol=1e-8)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_rows_sum_to_one_and_gradient(self, seed):
        rng = np.random.default_rng(seed)
        n = 400
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        eta = np.column_stack([np.zeros(n), X @ [0.2, 0.5], X @ [-0.3, -0.4]])
        p = np.exp(eta) / np.exp(eta).sum(axis=1, keepdims=True)
        y = 1 + (rng.uniform(size=n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
        w = rng.uniform(0.5, 2, n)
        fit = sm.weighted_multinomial([X, X], y, w)
        np.testing.assert_allclose(fit.fitted.sum(axis=1), 1.0, atol=1e-12)
        assert np.all((fit.fitted > 0) & (fit.fitted < 1))
        assert np.max(np.abs(fit.gradient)) < 1e-8

        def loglik(theta):
            return sm.multinomial_loglik([X, X], [theta[:2], theta[2:]], y, w, [np.zeros(n)] * 2)

        probe = np.concatenate(fit.coef) + 0.05
        pi = sm._multinomial_probs(np.column_stack([X @ probe[:2], X @ probe[2:]]))
        Y = np.eye(3)[y - 1]
        analytic = np.concatenate([X.T @ (w * (Y[:, k] - pi[:, k])) for k in (1, 2)])
        np.testing.assert_allclose(_fd_gradient(loglik, probe), analytic, rtol=1e-5)

    def test_missing_category_diverges(self):
        with pytest.raises(DivergedToInfinity):
            sm.weighted_multinomial([np.ones((10, 1))] * 2, np.array([1, 2] * 5))

    def test_penalty_shrinks_only_penalised_columns(self):
        rng = np.random.default_rng(7)
        n = 300
        X = np.column_stack([np.ones(n), rng.normal(size=n)])
        y = 1 + (rng.uniform(size=n) < expit(X @ [0.0, 1.0])).astype(int)
        free = sm.weighted_multinomial([X], y)
        pen = sm.weighted_multinomial([X], y, penalty=[np.array([0.0, 50.0])])
        assert abs(pen.coef[0][1]) < abs(free.coef[0][1])
        # unpenalised intercept still solves its score equation
        assert abs(pen.gradient[0]) < 1e-8
