"""Censoring models and inverse probability of censoring weights."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from .dgm import DgmConfig
from .errors import FitDiverged, FitSingular
from .msm_data import Cohort

DEFAULT_CAP = 10.0


@dataclass(frozen=True)
class CoxModel:
    coefficients: np.ndarray
    covariate_means: np.ndarray
    event_times: np.ndarray
    baseline_cumhaz: np.ndarray
    loglik: float = 0.0
    score: Optional[np.ndarray] = None
    information: Optional[np.ndarray] = None
    iterations: int = 0

    def cumulative_hazard(self, t) -> np.ndarray:
        """Breslow baseline cumulative hazard (at the covariate means)."""
        t = np.asarray(t, dtype=float)
        if self.event_times.size == 0:
            return np.zeros_like(t)
        idx = np.searchsorted(self.event_times, t, "right") - 1
        return np.where(idx >= 0, self.baseline_cumhaz[np.maximum(idx, 0)], 0.0)

    @property
    def se(self) -> np.ndarray:
        if self.information is None or self.coefficients.size == 0:
            return np.zeros(0)
        return np.sqrt(np.diag(linalg.inv(self.information)))

    def linear_predictor(self, Z) -> np.ndarray:
        Z = np.asarray(Z, dtype=float).reshape(-1, self.coefficients.size)
        return (Z - self.covariate_means) @ self.coefficients


def _risk_sums(order_times, r, Zc):
    """Reverse cumulative sums S0, S1, S2 over the risk set of each sorted row."""
    S0 = np.cumsum(r[::-1])[::-1]
    rz = r[:, None] * Zc
    S1 = np.cumsum(rz[::-1], axis=0)[::-1]
    rzz = rz[:, :, None] * Zc[:, None, :]
    S2 = np.cumsum(rzz[::-1], axis=0)[::-1]
    return S0, S1, S2


def fit_cox(times, status, Z=None, max_iter: int = 50, tol: float = 1e-8) -> CoxModel:
    """Cox proportional hazards fit with Breslow ties and Breslow baseline.

    Newton-Raphson on the centred covariates; converged when the largest
    absolute score component drops below ``tol``.
    """
    times = np.asarray(times, dtype=float)
    status = np.asarray(status, dtype=np.int64)
    n = times.size
    Z = np.zeros((n, 0)) if Z is None else np.asarray(Z, dtype=float).reshape(n, -1)
    p = Z.shape[1]
    if n <= p:
        raise FitSingular("need more subjects than covariates")
    if not np.any(status == 1):
        # no events: the baseline hazard is identically zero
        return CoxModel(np.zeros(p), Z.mean(axis=0) if n else np.zeros(p), np.zeros(0), np.zeros(0))

    order = np.argsort(times, kind="stable")
    t_s, d_s, Zs = times[order], status[order], Z[order]
    means = Zs.mean(axis=0)
    Zc = Zs - means
    if p and np.linalg.matrix_rank(Zc) < p:
        raise FitSingular("covariate matrix is rank deficient (constant or collinear columns)")
    # first sorted row of every tie block indexes the full risk set
    first = np.searchsorted(t_s, t_s, "left")
    ev = np.flatnonzero(d_s == 1)

    def evaluate(beta):
        eta = Zc @ beta
        r = np.exp(eta)
        S0, S1, S2 = _risk_sums(t_s, r, Zc)
        f = first[ev]
        s0, s1, s2 = S0[f], S1[f], S2[f]
        ll = float(np.sum(eta[ev] - np.log(s0)))
        zbar = s1 / s0[:, None]
        score = (Zc[ev] - zbar).sum(axis=0)
        info = (s2 / s0[:, None, None] - zbar[:, :, None] * zbar[:, None, :]).sum(axis=0)
        return ll, score, info, S0

    beta = np.zeros(p)
    ll, score, info, S0 = evaluate(beta)
    trace = [ll]
    it = 0
    while p and np.max(np.abs(score)) >= tol:
        it += 1
        if it > max_iter:
            raise FitDiverged(f"Cox fit did not converge in {max_iter} iterations", trace)
        try:
            step = linalg.solve(info, score, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise FitSingular("Cox information matrix is singular")
        t = 1.0
        while True:
            cand = beta + t * step
            c_ll, c_score, c_info, c_S0 = evaluate(cand)
            if c_ll >= ll - 1e-12 * abs(ll) or t < 1e-8:
                break
            t *= 0.5
        if np.max(np.abs(cand)) > 30:
            raise FitDiverged("Cox coefficients diverge (monotone likelihood)", trace)
        if c_ll - ll < 1e-13 * abs(ll) and np.max(np.abs(c_score)) < 1e-6 * max(1.0, ev.size):
            # already at the floating point optimum
            beta, ll, score, info, S0 = cand, c_ll, c_score, c_info, c_S0
            trace.append(ll)
            break
        beta, ll, score, info, S0 = cand, c_ll, c_score, c_info, c_S0
        trace.append(ll)

    uniq_t, start = np.unique(t_s[ev], return_index=True)
    d = np.diff(np.append(start, ev.size))
    hazard = d / S0[first[ev][start]]
    return CoxModel(beta, means, uniq_t, np.cumsum(hazard), ll, score, info if p else None, it)


def censoring_survival(model: CoxModel, z, t):
    """``P(C > t | z)`` under the fitted Cox model."""
    lp = model.linear_predictor(z) if model.coefficients.size else np.zeros(1)
    out = np.exp(-model.cumulative_hazard(t) * np.exp(lp))
    return float(out[0]) if out.size == 1 else out


def censoring_data(cohort: Cohort):
    """Time-to-censoring data: censoring is the event, absorption censors it."""
    arr = cohort.arrays
    absorbed = ~np.isnan(arr.absorb_time)
    times = np.where(absorbed, arr.absorb_time, arr.last_observed)
    status = (~absorbed).astype(np.int64)
    return times, status


@dataclass(frozen=True)
class WeightVector:
    weights: np.ndarray
    cap: float
    n_zero_survival: int = 0

    @property
    def present(self) -> np.ndarray:
        return ~np.isnan(self.weights)


def _horizon_times(cohort: Cohort, t: float):
    arr = cohort.arrays
    known = t <= arr.last_observed
    absorbed = ~np.isnan(arr.absorb_time) & (arr.absorb_time <= t)
    tau = np.where(absorbed, arr.absorb_time, t)
    return known, tau


def _weights_from_survival(known, surv, cap):
    w = np.full(known.size, np.nan)
    zero = known & (surv <= 0)
    with np.errstate(divide="ignore"):
        w[known] = np.minimum(cap, 1.0 / surv[known])
    w[zero] = cap
    return WeightVector(w, cap, int(zero.sum()))


def compute_ipcw(cohort: Cohort, model: CoxModel, t: float, cap: float = DEFAULT_CAP) -> WeightVector:
    """Weights ``min(cap, 1 / P(C > tau_i | z_i))``; ``tau_i`` is the absorption
    time for subjects absorbed by ``t`` and ``t`` otherwise."""
    if not cap >= 1:
        raise ValueError("cap must be >= 1")
    known, tau = _horizon_times(cohort, t)
    if model.coefficients.size:
        lp = model.linear_predictor(cohort.covariates)
    else:
        lp = np.zeros(len(cohort))
    surv = np.exp(-model.cumulative_hazard(tau) * np.exp(lp))
    return _weights_from_survival(known, surv, cap)


def estimated_weights(cohort: Cohort, t: float, cap: float = DEFAULT_CAP, covariates=None) -> WeightVector:
    """Weights from a Cox censoring model on all (or the given) covariates."""
    times, status = censoring_data(cohort)
    Z = cohort.covariates if covariates is None else covariates
    return compute_ipcw(cohort, fit_cox(times, status, Z), t, cap)


def misspecified_weights(cohort: Cohort, t: float, cap: float = DEFAULT_CAP) -> WeightVector:
    """Weights from a covariate-free censoring model (Nelson-Aalen baseline)."""
    times, status = censoring_data(cohort)
    model = fit_cox(times, status, None)
    known, tau = _horizon_times(cohort, t)
    surv = np.exp(-model.cumulative_hazard(tau))
    return _weights_from_survival(known, surv, cap)


def true_weights(cohort: Cohort, config: DgmConfig, t: float, cap: float = DEFAULT_CAP) -> WeightVector:
    """Weights from the generating exponential censoring distribution."""
    known, tau = _horizon_times(cohort, t)
    if math.isinf(config.lambda_cens):
        surv = np.ones(len(cohort))
    else:
        rate = np.exp(cohort.covariates @ np.asarray(config.beta_cens)) / config.lambda_cens
        surv = np.exp(-rate * tau)
    return _weights_from_survival(known, surv, cap)


def unit_weights(cohort: Cohort, t: float) -> WeightVector:
    known, _ = _horizon_times(cohort, t)
    return WeightVector(np.where(known, 1.0, np.nan), math.inf)


def weights_to_csv(cohort: Cohort, weights: WeightVector) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "weight"])
    for sid, v in zip(cohort.ids, weights.weights):
        w.writerow([sid, "" if np.isnan(v) else repr(float(v))])
    return buf.getvalue()


def weights_from_csv(text: str, cohort: Cohort, cap: float = math.inf) -> WeightVector:
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if header != ["id", "weight"]:
        raise ValueError("weights CSV header must be id,weight")
    table = {}
    for row in reader:
        if row:
            raw = row[0].strip()
            try:
                key = int(raw)
            except ValueError:
                key = raw
            table[key] = float(row[1]) if row[1].strip() else np.nan
    missing = [sid for sid in cohort.ids if sid not in table]
    if missing:
        raise KeyError(missing[:10])
    return WeightVector(np.array([table[sid] for sid in cohort.ids]), cap)
