"""True transition probabilities for exponential-hazard progressive models.

For a subject with linear predictor ``eta`` all hazards are the baseline
rates times ``exp(eta)``, so ``P_ij(u, t | z) = G_ij(exp(eta) * (t - u))``
where ``G`` is the baseline (``eta = 0``) transition function.  Each
``G_ij`` is obtained backwards from the absorbing states with

    G_ij(s) = sum_m  int_0^s  lambda_im exp(-Lambda_i r) G_mj(s - r) dr,

evaluated by composite Gauss-Kronrod quadrature.  Inner functions are
memoised as Chebyshev interpolants on a shared ``[0, s_max]`` grid so the
nested integrals cost one level of quadrature each.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from numpy.polynomial import Chebyshev

from .dgm import DgmConfig
from .errors import DimensionMismatch, ToleranceNotMet
from .msm_data import PredictionMatrix

DEFAULT_TOL = 1e-6

# 15-point Kronrod rule with embedded 7-point Gauss rule on [-1, 1].
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])
GK_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
GK_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss nodes are the odd-indexed Kronrod nodes
G_WEIGHTS = np.zeros(15)
G_WEIGHTS[1::2] = np.concatenate([_WG[:-1], _WG[::-1]])


def _convolve(rate: float, total: float, inner, s: np.ndarray, tol: float, max_panels: int = 1024):
    """``int_0^s rate * exp(-total r) * inner(s - r) dr`` for each entry of ``s``."""
    s = np.asarray(s, dtype=float)
    panels = 4
    while True:
        edges = np.linspace(0.0, 1.0, panels + 1)
        half = 0.5 * (edges[1:] - edges[:-1])
        mid = 0.5 * (edges[1:] + edges[:-1])
        u = (mid[:, None] + half[:, None] * GK_NODES[None, :]).ravel()  # fraction of s
        r = s[:, None] * u[None, :]
        f = rate * np.exp(-total * r) * inner(s[:, None] - r)
        wk = (half[:, None] * GK_WEIGHTS[None, :]).ravel()
        wg = (half[:, None] * G_WEIGHTS[None, :]).ravel()
        kron = (f @ wk) * s
        gauss = (f @ wg) * s
        err = np.max(np.abs(kron - gauss)) if s.size else 0.0
        if err <= tol * 1e-2:
            return kron
        if panels >= max_panels:
            raise ToleranceNotMet(f"quadrature error {err:.3g} after {panels} panels")
        panels *= 2


class _Tabulated:
    """Chebyshev interpolant of a function on ``[0, s_max]``, refined until it
    matches direct evaluation at off-grid check points."""

    def __init__(self, direct, s_max: float, tol: float, max_degree: int = 1024):
        deg = 32
        check = np.linspace(0.0, s_max, 97)[1:-1] + s_max / 193.0
        exact = direct(check)
        while True:
            cheb = Chebyshev.interpolate(direct, deg, domain=[0.0, s_max])
            err = np.max(np.abs(cheb(check) - exact))
            if err <= tol * 1e-2:
                self.cheb = cheb
                self.degree = deg
                return
            if deg >= max_degree:
                raise ToleranceNotMet(f"interpolation error {err:.3g} at degree {deg}")
            deg *= 2

    def __call__(self, s):
        return self.cheb(s)


class TruthEngine:
    """Baseline transition functions ``G_ij`` for one configuration.

    Parameters
    ----------
    config : DgmConfig
        Structure and baseline scales; covariate effects enter only through
        the time rescaling applied by the callers.
    s_max : float
        Largest rescaled duration that will be requested.
    """

    def __init__(self, config: DgmConfig, s_max: float, tol: float = DEFAULT_TOL):
        self.structure = config.structure
        self.R = config.rate_matrix()
        self.total = self.R.sum(axis=1)
        self.s_max = float(s_max)
        self.tol = tol
        self._table: dict = {}
        self._route_table: dict = {}

    def stay(self, i: int, s):
        return np.exp(-self.total[i - 1] * np.asarray(s, dtype=float))

    def direct(self, i: int, j: int, s) -> np.ndarray:
        """``G_ij(s)`` by one level of quadrature over tabulated inner functions."""
        s = np.asarray(s, dtype=float)
        if i == j:
            return self.stay(i, s)
        out = np.zeros_like(s)
        for m in self.structure.successors(i):
            if not self.structure.routes(m, j):
                continue
            out = out + _convolve(self.R[i - 1, m - 1], self.total[i - 1], self.tabulated(m, j), s, self.tol)
        return out

    def tabulated(self, i: int, j: int):
        if i == j:
            return lambda s: self.stay(i, s)
        key = (i, j)
        if key not in self._table:
            self._table[key] = _Tabulated(lambda s: self.direct(i, j, s), self.s_max, self.tol)
        return self._table[key]

    def route_direct(self, route: tuple, s) -> np.ndarray:
        """Probability of following exactly ``route`` and occupying its last state."""
        s = np.asarray(s, dtype=float)
        if len(route) == 1:
            return self.stay(route[0], s)
        i, m = route[0], route[1]
        if self.R[i - 1, m - 1] == 0:
            raise ValueError(f"route uses missing transition {i}->{m}")
        return _convolve(self.R[i - 1, m - 1], self.total[i - 1], self.route_tabulated(route[1:]), s, self.tol)

    def route_tabulated(self, route: tuple):
        if len(route) == 1:
            return lambda s: self.stay(route[0], s)
        if route not in self._route_table:
            self._route_table[route] = _Tabulated(lambda s: self.route_direct(route, s), self.s_max, self.tol)
        return self._route_table[route]


def _s_bucket(s_max: float) -> float:
    # round up to a power of two so nearby requests share one engine
    return float(2.0 ** np.ceil(np.log2(max(s_max, 1e-12))))


@lru_cache(maxsize=16)
def _engine(scales: tuple, structure, s_max: float, tol: float) -> TruthEngine:
    cfg = DgmConfig(structure, scales, beta_trans=(0.0,), beta_cens=(0.0,))
    return TruthEngine(cfg, s_max, tol)


def engine_for(config: DgmConfig, s_max: float, tol: float = DEFAULT_TOL) -> TruthEngine:
    return _engine(config.scales, config.structure, _s_bucket(s_max), tol)


def _scaled_durations(config: DgmConfig, Z, t: float, u: float = 0.0) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    if Z.shape[1] != config.n_covariates:
        raise DimensionMismatch(f"expected {config.n_covariates} covariates, got {Z.shape[1]}")
    return np.exp(Z @ np.asarray(config.beta_trans)) * (t - u)


def state_survival(config: DgmConfig, z, j: int, t: float) -> float:
    """Probability of not yet having left state ``j`` after ``t`` days there."""
    if t < 0:
        raise ValueError("t must be non-negative")
    s = _scaled_durations(config, z, t)[0]
    return float(np.exp(-config.rate_matrix()[j - 1].sum() * s))


def transition_prob(config: DgmConfig, z, i: int, j: int, u: float, t: float,
                    tol: float = DEFAULT_TOL) -> float:
    """``P(X(t) = j | X(u) = i, z)``."""
    if t < u:
        raise ValueError("t must be >= u")
    s = _scaled_durations(config, z, t, u)
    if not config.structure.routes(i, j):
        return 0.0
    eng = engine_for(config, s.max(), tol)
    return float(eng.direct(i, j, s)[0])


def true_transition_prob(config: DgmConfig, z, k: int, t: float, tol: float = DEFAULT_TOL) -> float:
    return transition_prob(config, z, 1, k, 0.0, t, tol)


def route_prob(config: DgmConfig, z, route, t: float, u: float = 0.0, tol: float = DEFAULT_TOL) -> float:
    """Probability of being in ``route[-1]`` at ``t`` having travelled exactly ``route``."""
    s = _scaled_durations(config, z, t, u)
    eng = engine_for(config, s.max(), tol)
    return float(eng.route_direct(tuple(route), s)[0])


def true_transition_probs(config: DgmConfig, Z, t: float, tol: float = DEFAULT_TOL) -> np.ndarray:
    """``n x K`` matrix of ``P(X(t) = k | X(0) = 1, z_i)``."""
    s = _scaled_durations(config, Z, t)
    K = config.structure.n_states
    eng = engine_for(config, s.max() if s.size else 1.0, tol)
    out = np.empty((s.size, K))
    for k in range(1, K + 1):
        out[:, k - 1] = eng.direct(1, k, s) if config.structure.routes(1, k) else 0.0
    return out


def true_predictions(config: DgmConfig, cohort_or_Z, t: Optional[float] = None) -> PredictionMatrix:
    """Perfectly calibrated predictions (the truth) as a PredictionMatrix."""
    t = config.horizon if t is None else t
    Z = getattr(cohort_or_Z, "covariates", cohort_or_Z)
    ids = getattr(cohort_or_Z, "ids", None)
    return PredictionMatrix(t, true_transition_probs(config, Z, t), ids)


@dataclass(frozen=True)
class Estimand:
    predicted: np.ndarray
    truth: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        """Average of (true - predicted) per state."""
        return (self.truth - self.predicted).mean(axis=0)

    def points(self, k: int):
        order = np.argsort(self.predicted[:, k - 1], kind="stable")
        return self.predicted[order, k - 1], self.truth[order, k - 1]


def compute_estimand(preds: PredictionMatrix, truths) -> Estimand:
    truth = np.asarray(getattr(truths, "probs", truths), dtype=float)
    if truth.shape != preds.probs.shape:
        raise DimensionMismatch(f"predictions {preds.probs.shape} vs truth {truth.shape}")
    return Estimand(np.asarray(preds.probs), truth)


@dataclass(frozen=True)
class ReferenceCurve:
    x: np.ndarray
    y: np.ndarray
    clipped: bool


def true_curve_reference(estimand: Estimand, query, k: int) -> ReferenceCurve:
    """True calibration curve ``p_hat -> p`` for state ``k`` evaluated at ``query``.

    Uses monotone (PCHIP) interpolation over the estimand points; queries
    outside the observed range are clipped to it.
    """
    from scipy.interpolate import PchipInterpolator

    x, y = estimand.points(k)
    ux, inv = np.unique(x, return_inverse=True)
    uy = np.bincount(inv, weights=y) / np.bincount(inv)
    q = np.asarray(query, dtype=float)
    clipped = bool(np.any((q < ux[0]) | (q > ux[-1])))
    qc = np.clip(q, ux[0], ux[-1])
    if ux.size == 1:
        return ReferenceCurve(q, np.full_like(q, uy[0]), clipped)
    return ReferenceCurve(q, PchipInterpolator(ux, uy)(qc), clipped)
