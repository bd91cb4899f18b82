"""Calibration of predicted transition probabilities out of state 1.

Four methods are provided:

* ``AJ``  - grouped Aalen-Johansen (mean calibration and group points),
* ``PV``  - loess of grouped Aalen-Johansen pseudo-values on predictions,
* ``BLR`` - IPCW-weighted loess / logistic recalibration, one state at a time,
* ``MLR`` - IPCW-weighted multinomial recalibration of all states at once.

Mean calibration is always oriented as observed minus predicted.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import expit, logit

from . import aalen_johansen as aj
from .errors import BootstrapUnstable, DimensionMismatch, GroupTooSmall, MscalibError
from .ipcw import WeightVector
from .msm_data import Cohort, PredictionMatrix, clamp_predictions, indicator_matrix
from .smoothers import (
    LOESS_DEGREE,
    LOESS_SPAN,
    SPLINE_DF,
    loess,
    natural_spline_basis,
    weighted_logistic,
    weighted_multinomial,
)

METHODS = ("AJ", "PV", "BLR", "MLR")
# quadratic penalty on the spline curvature columns of the MLR design;
# linear terms stay unpenalised, as in a smoothing spline
MLR_CURVATURE_PENALTY = 10.0
# weak ridge on the linear columns: the log-ratios are nearly collinear and
# their linear tails otherwise run off to infinity where a state is sparse
MLR_LINEAR_PENALTY = 1.0


@dataclass(frozen=True)
class CalibrationResult:
    method: str
    state: int
    horizon: float
    predicted: np.ndarray
    observed: np.ndarray
    mean_calibration: float
    intercept: Optional[float] = None
    slope: Optional[float] = None
    notes: tuple = ()

    @property
    def points(self) -> list:
        return list(zip(self.predicted.tolist(), self.observed.tolist()))


def _sorted_result(method, state, horizon, x, y, mean, intercept=None, slope=None, notes=()):
    order = np.argsort(x, kind="stable")
    return CalibrationResult(method, state, horizon, np.asarray(x)[order], np.asarray(y)[order],
                             float(mean), intercept, slope, tuple(notes))


# -- pseudo-values -------------------------------------------------------------

@dataclass(frozen=True)
class PseudoValueMatrix:
    values: np.ndarray
    groupings: tuple


def pseudo_values(cohort: Cohort, preds: PredictionMatrix, t: Optional[float] = None,
                  n_groups: int = aj.DEFAULT_GROUPS) -> PseudoValueMatrix:
    """Jackknife pseudo-values of the Aalen-Johansen estimate, computed within
    groups of similar predicted risk (separately for every state)."""
    t = preds.horizon if t is None else t
    n, K = len(cohort), cohort.n_states
    if preds.n != n:
        raise DimensionMismatch("cohort and predictions differ in length")
    arr = cohort.arrays
    values = np.empty((n, K))
    groupings = []
    for k in range(1, K + 1):
        grouping = aj.make_risk_groups(preds, k, n_groups)
        groupings.append(grouping)
        for g in range(n_groups):
            idx = grouping.members(g)
            m = idx.size
            if m < 2:
                raise GroupTooSmall(f"group {g} for state {k} has {m} subject(s)")
            sub = arr.take(idx)
            full = aj._aj_arrays(sub, K, t).probs[k - 1]
            loo = aj._aj_loo_arrays(sub, K, t)[:, k - 1]
            values[idx, k - 1] = m * full - (m - 1) * loo
    return PseudoValueMatrix(values, tuple(groupings))


def pv_mean(pv: PseudoValueMatrix, preds: PredictionMatrix, k: int) -> float:
    return float(np.mean(pv.values[:, k - 1] - preds.probs[:, k - 1]))


def pv_weak(pv: PseudoValueMatrix, preds: PredictionMatrix, k: int) -> float:
    """Slope of the no-intercept least-squares fit of pseudo-values on predictions."""
    p = preds.probs[:, k - 1]
    return float(np.dot(p, pv.values[:, k - 1]) / np.dot(p, p))


def pv_moderate(pv: PseudoValueMatrix, preds: PredictionMatrix, k: int,
                span: float = LOESS_SPAN, degree: int = LOESS_DEGREE) -> CalibrationResult:
    p = preds.probs[:, k - 1]
    fit = loess(p, pv.values[:, k - 1], None, span, degree)
    notes = ("degenerate loess neighbourhoods",) if fit.degenerate else ()
    return _sorted_result("PV", k, preds.horizon, p, fit.fitted, pv_mean(pv, preds, k),
                          None, pv_weak(pv, preds, k), notes)


# -- BLR-IPCW --------------------------------------------------------------------

def _wvec(weights) -> np.ndarray:
    return np.asarray(weights.weights if isinstance(weights, WeightVector) else weights, dtype=float)


def blr_moderate(preds: PredictionMatrix, indicators: np.ndarray, weights, k: int,
                 span: float = LOESS_SPAN, degree: int = LOESS_DEGREE) -> CalibrationResult:
    """IPCW-weighted loess of the state-``k`` indicator on ``p_hat_k``, clipped to [0, 1]."""
    w = _wvec(weights)
    inc = ~np.isnan(w)
    p = preds.probs[inc, k - 1]
    y = np.asarray(indicators)[inc, k - 1]
    fit = loess(p, y, w[inc], span, degree)
    notes = ["degenerate loess neighbourhoods"] if fit.degenerate else []
    try:
        mean = blr_mean(preds, indicators, weights, k)
    except MscalibError as exc:
        mean, notes = math.nan, notes + [f"mean: {exc}"]
    try:
        a, b = blr_weak(preds, indicators, weights, k)
    except MscalibError as exc:
        a = b = None
        notes.append(f"weak: {exc}")
    return _sorted_result("BLR", k, preds.horizon, p, np.clip(fit.fitted, 0.0, 1.0), mean, a, b, notes)


def blr_mean(preds: PredictionMatrix, indicators: np.ndarray, weights, k: int) -> float:
    """Calibration-in-the-large on the probability scale.

    The intercept is fitted on the included subjects with offset
    ``logit(p_hat_k)``; the recalibrated probabilities are averaged over every
    subject of the cohort.
    """
    w = _wvec(weights)
    inc = ~np.isnan(w)
    p = preds.probs[:, k - 1]
    off = logit(p)
    fit = weighted_logistic(np.ones((inc.sum(), 1)), np.asarray(indicators)[inc, k - 1], w[inc], off[inc])
    return float(np.mean(expit(fit.coef[0] + off) - p))


def blr_weak(preds: PredictionMatrix, indicators: np.ndarray, weights, k: int) -> tuple[float, float]:
    w = _wvec(weights)
    inc = ~np.isnan(w)
    lp = logit(preds.probs[inc, k - 1])
    X = np.column_stack([np.ones(lp.size), lp])
    fit = weighted_logistic(X, np.asarray(indicators)[inc, k - 1], w[inc])
    return float(fit.coef[0]), float(fit.coef[1])


# -- MLR-IPCW --------------------------------------------------------------------

def log_ratios(probs: np.ndarray) -> np.ndarray:
    """``ln(p_k / p_1)`` for k = 2..K."""
    probs = np.asarray(probs, dtype=float)
    return np.log(probs[:, 1:]) - np.log(probs[:, :1])


def _categories(indicators: np.ndarray) -> np.ndarray:
    return np.argmax(indicators, axis=1) + 1


@dataclass(frozen=True)
class MlrFit:
    observed: np.ndarray  # n_included x K fitted probabilities
    included: np.ndarray
    ridge_used: bool


def mlr_fit(preds: PredictionMatrix, indicators: np.ndarray, weights, df: int = SPLINE_DF,
            curvature_penalty: float = MLR_CURVATURE_PENALTY,
            linear_penalty: float = MLR_LINEAR_PENALTY) -> MlrFit:
    """Multinomial recalibration on spline bases of every log-ratio, shared by all equations.

    The log-ratios are usually strongly correlated, so the unpenalised fit is
    poorly determined in sparse regions; small penalties on the spline
    columns (stronger on the curvature columns) keep it bounded.
    """
    w = _wvec(weights)
    inc = ~np.isnan(w)
    lp = log_ratios(preds.probs[inc])
    cols = [np.ones((lp.shape[0], 1))]
    for h in range(lp.shape[1]):
        basis = natural_spline_basis(lp[:, h], df).basis
        cols.append(basis - basis.mean(axis=0))
    X = np.column_stack(cols)
    K = preds.n_states
    pen = np.array([0.0] + ([linear_penalty] + [curvature_penalty] * (df - 1)) * lp.shape[1])
    fit = weighted_multinomial([X] * (K - 1), _categories(np.asarray(indicators)[inc]), w[inc],
                               penalty=[pen] * (K - 1))
    return MlrFit(fit.fitted, inc, fit.ridge_used)


def mlr_mean(preds: PredictionMatrix, indicators: np.ndarray, weights) -> np.ndarray:
    """Mean calibration of every state from intercept-only recalibration with
    offsets ``ln(p_k / p_1)``; fitted values are averaged over the whole cohort."""
    w = _wvec(weights)
    inc = ~np.isnan(w)
    lp = log_ratios(preds.probs)
    K = preds.n_states
    m = int(inc.sum())
    fit = weighted_multinomial([np.ones((m, 1))] * (K - 1), _categories(np.asarray(indicators)[inc]),
                               w[inc], [lp[inc, h] for h in range(K - 1)])
    alpha = np.array([c[0] for c in fit.coef])
    eta = np.column_stack([np.zeros(preds.n), alpha + lp])
    eta -= eta.max(axis=1, keepdims=True)
    obs = np.exp(eta)
    obs /= obs.sum(axis=1, keepdims=True)
    return (obs - preds.probs).mean(axis=0)


def mlr_weak(preds: PredictionMatrix, indicators: np.ndarray, weights):
    """Intercepts and slopes of ``log-odds(k vs 1) = a_k + b_k * ln(p_k / p_1)``."""
    w = _wvec(weights)
    inc = ~np.isnan(w)
    lp = log_ratios(preds.probs[inc])
    K = preds.n_states
    blocks = [np.column_stack([np.ones(lp.shape[0]), lp[:, h]]) for h in range(K - 1)]
    fit = weighted_multinomial(blocks, _categories(np.asarray(indicators)[inc]), w[inc])
    return np.array([c[0] for c in fit.coef]), np.array([c[1] for c in fit.coef])


def mlr_moderate(preds: PredictionMatrix, indicators: np.ndarray, weights,
                 df: int = SPLINE_DF, curvature_penalty: float = MLR_CURVATURE_PENALTY,
                 linear_penalty: float = MLR_LINEAR_PENALTY) -> dict:
    """Per-state scatter of (predicted, recalibrated) for the included subjects."""
    fit = mlr_fit(preds, indicators, weights, df, curvature_penalty, linear_penalty)
    notes = ["ridge added to singular Hessian"] if fit.ridge_used else []
    try:
        means = mlr_mean(preds, indicators, weights)
    except MscalibError as exc:
        means = np.full(preds.n_states, math.nan)
        notes.append(f"mean: {exc}")
    try:
        intercepts, slopes = mlr_weak(preds, indicators, weights)
    except MscalibError as exc:
        intercepts = slopes = None
        notes.append(f"weak: {exc}")
    out = {}
    for k in range(1, preds.n_states + 1):
        a = b = None
        if slopes is not None and k > 1:
            a, b = float(intercepts[k - 2]), float(slopes[k - 2])
        out[k] = _sorted_result("MLR", k, preds.horizon, preds.probs[fit.included, k - 1],
                                fit.observed[:, k - 1], means[k - 1], a, b, notes)
    return out


# -- AJ --------------------------------------------------------------------------

def aj_result(cohort: Cohort, preds: PredictionMatrix, k: int, n_groups: int = aj.DEFAULT_GROUPS) -> CalibrationResult:
    pts = aj.aj_moderate_points(cohort, preds, k, n_groups)
    x = np.array([a for a, _ in pts])
    y = np.array([b for _, b in pts])
    mean = aj.aj_mean_calibration(cohort, preds, k, n_groups)
    return _sorted_result("AJ", k, preds.horizon, x, y, mean)


# -- orchestration ----------------------------------------------------------------

def assess(method: str, cohort: Cohort, preds: PredictionMatrix, weights=None,
           n_groups: int = aj.DEFAULT_GROUPS, span: float = LOESS_SPAN, df: int = SPLINE_DF,
           moderate: bool = True) -> dict:
    """Run one method for every state; returns ``{state: CalibrationResult}``.

    ``weights`` is required for BLR and MLR. With ``moderate=False`` only the
    mean calibration is computed (curves are left empty).
    """
    method = method.upper()
    K = cohort.n_states
    preds = clamp_predictions(preds)
    t = preds.horizon
    if method == "AJ":
        if moderate:
            return {k: aj_result(cohort, preds, k, n_groups) for k in range(1, K + 1)}
        return {k: _sorted_result("AJ", k, t, [], [], aj.aj_mean_calibration(cohort, preds, k, n_groups))
                for k in range(1, K + 1)}
    if method == "PV":
        pv = pseudo_values(cohort, preds, t, n_groups)
        if moderate:
            return {k: pv_moderate(pv, preds, k, span) for k in range(1, K + 1)}
        return {k: _sorted_result("PV", k, t, [], [], pv_mean(pv, preds, k)) for k in range(1, K + 1)}
    if weights is None:
        raise ValueError(f"{method} needs IPCW weights")
    _, ind = indicator_matrix(cohort, t)
    if method == "BLR":
        if moderate:
            return {k: blr_moderate(preds, ind, weights, k, span) for k in range(1, K + 1)}
        out = {}
        for k in range(1, K + 1):
            try:
                out[k] = _sorted_result("BLR", k, t, [], [], blr_mean(preds, ind, weights, k))
            except MscalibError as exc:
                out[k] = _sorted_result("BLR", k, t, [], [], math.nan, notes=(str(exc),))
        return out
    if method == "MLR":
        if moderate:
            return mlr_moderate(preds, ind, weights, df)
        means = mlr_mean(preds, ind, weights)
        return {k: _sorted_result("MLR", k, t, [], [], means[k - 1]) for k in range(1, K + 1)}
    raise ValueError(f"unknown method {method!r}; expected one of {', '.join(METHODS)}")


def bootstrap_se(statistic: Callable[[np.ndarray], np.ndarray], n: int, B: int, seed: int,
                 min_success: float = 0.9) -> np.ndarray:
    """Bootstrap standard error of a vector statistic of resampled subject indices.

    ``statistic(index)`` receives an index array drawn with replacement; any
    :class:`MscalibError` it raises counts as a failed replicate.
    """
    if B < 50:
        raise ValueError("B must be at least 50")
    stats, failures = [], 0
    for b in range(B):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(3, b))))
        idx = rng.integers(0, n, size=n)
        try:
            stats.append(np.atleast_1d(np.asarray(statistic(idx), dtype=float)))
        except MscalibError:
            failures += 1
    if len(stats) < min_success * B:
        raise BootstrapUnstable(f"{failures} of {B} bootstrap replicates failed")
    arr = np.array(stats)
    return np.nanstd(arr, axis=0, ddof=1)


def mean_calibration_statistic(method: str, cohort: Cohort, preds: PredictionMatrix,
                               weight_fn: Optional[Callable[[Cohort], WeightVector]] = None,
                               n_groups: int = aj.DEFAULT_GROUPS) -> Callable[[np.ndarray], np.ndarray]:
    """Statistic for :func:`bootstrap_se`: per-state mean calibration of ``method``
    on a resampled cohort, with weights refitted by ``weight_fn``."""

    def stat(idx):
        sub = cohort.take(idx, relabel=True)
        p = PredictionMatrix(preds.horizon, preds.probs[idx], None, preds.row_normalized, preds.clamped)
        w = weight_fn(sub) if weight_fn is not None else None
        res = assess(method, sub, p, w, n_groups=n_groups, moderate=False)
        return np.array([res[k].mean_calibration for k in sorted(res)])

    return stat
