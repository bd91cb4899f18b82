"""Numerical substrate for the calibration regressions.

Weighted loess with a tricube kernel, natural cubic spline bases, and
Newton/IRLS solvers for weighted binary and multinomial logistic models.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from numba import njit
from scipy import linalg
from scipy.special import expit, log_expit, logsumexp

from .errors import DivergedToInfinity, FitDiverged, FitSingular, TooFewDistinct

LOESS_SPAN = 0.75
LOESS_DEGREE = 2
SPLINE_DF = 4
ETA_LIMIT = 60.0


@dataclass(frozen=True)
class LoessFit:
    span: float
    degree: int
    x: np.ndarray
    fitted: np.ndarray
    x_sorted: np.ndarray
    n_degenerate: int = 0

    @property
    def degenerate(self) -> bool:
        return self.n_degenerate > 0


def _neighbour_window(xs: np.ndarray, centres: np.ndarray, q: int):
    """Start of the ``q``-point window of sorted ``xs`` nearest each centre, and
    the distance to the ``q``-th nearest point."""
    n = xs.size
    pos = np.searchsorted(xs, centres)
    lo = np.clip(pos - q, 0, n - q)
    hi = np.clip(pos, 0, n - q)
    # smallest window start whose right edge is at least as far as its left edge
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        right_far = xs[mid + q - 1] - centres >= centres - xs[mid]
        hi = np.where(right_far, mid, hi)
        lo = np.where(right_far, lo, np.minimum(mid + 1, hi))
    best = np.maximum(xs[lo + q - 1] - centres, centres - xs[lo])
    prev = np.maximum(lo - 1, 0)
    alt = np.where(lo > 0, np.maximum(xs[prev + q - 1] - centres, centres - xs[prev]), np.inf)
    use_prev = alt < best
    return np.where(use_prev, prev, lo), np.where(use_prev, alt, best)


@njit(cache=True, fastmath=True)
def _local_moments(us, ys, ws, centres, starts, radius, q, degree):
    m = centres.size
    S = np.zeros((m, 5))
    T = np.zeros((m, 3))
    for i in range(m):
        c = centres[i]
        h = radius[i]
        s0 = s1 = s2 = s3 = s4 = 0.0
        t0 = t1 = t2 = 0.0
        if h > 0.0:
            inv = 1.0 / h
            for j in range(starts[i], starts[i] + q):
                v = (us[j] - c) * inv
                a = abs(v)
                e = max(1.0 - a * a * a, 0.0)
                k = e * e * e * ws[j]
                yj = ys[j]
                k1 = k * v
                k2 = k1 * v
                s0 += k
                s1 += k1
                s2 += k2
                s3 += k2 * v
                s4 += k2 * v * v
                t0 += k * yj
                t1 += k1 * yj
                t2 += k2 * yj
        else:
            # all q neighbours coincide with the centre
            for j in range(starts[i], starts[i] + q):
                if us[j] == c:
                    s0 += ws[j]
                    t0 += ws[j] * ys[j]
        S[i, 0] = s0
        S[i, 1] = s1
        S[i, 2] = s2
        S[i, 3] = s3
        S[i, 4] = s4
        T[i, 0] = t0
        T[i, 1] = t1
        T[i, 2] = t2
    return S[:, :2 * degree + 1], T[:, :degree + 1]


def loess(x, y, w=None, span: float = LOESS_SPAN, degree: int = LOESS_DEGREE) -> LoessFit:
    """Local polynomial fit at every ``x_i`` over its ``ceil(span * n)`` nearest neighbours.

    Neighbour weights are tricube(distance / radius) times ``w``. A local
    design that is singular falls back to the local weighted mean and is
    counted in ``n_degenerate``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.size
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    if not (y.size == n and w.size == n):
        raise ValueError("x, y and w must have equal length")
    if degree not in (0, 1, 2):
        raise ValueError("degree must be 0, 1 or 2")
    if not 0 < span <= 1:
        raise ValueError("span must lie in (0, 1]")
    q = int(math.ceil(span * n))
    if n < degree + 2 or q < degree + 2:
        raise ValueError("too few points for this span and degree")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")

    order = np.argsort(x, kind="stable")
    xs, ys, ws = x[order], y[order], w[order]
    centre_x, inverse = np.unique(xs, return_inverse=True)
    # unit scale for conditioning
    shift = 0.5 * (xs[0] + xs[-1])
    scale = max(0.5 * (xs[-1] - xs[0]), 1e-300)
    us = (xs - shift) / scale
    cu = (centre_x - shift) / scale
    starts, radius = _neighbour_window(us, cu, q)
    S, T = _local_moments(us, ys, ws, cu, starts.astype(np.int64), radius, q, degree)

    p = degree + 1
    A = np.empty((cu.size, p, p))
    for r in range(p):
        for c in range(p):
            A[:, r, c] = S[:, r + c]
    s0 = np.where(S[:, 0] > 0, S[:, 0], 1.0)
    An = A / s0[:, None, None]
    Tn = T / s0[:, None]
    ok = (np.abs(np.linalg.det(An)) > 1e-10) & (S[:, 0] > 0) & (radius > 0)
    vals = np.where(S[:, 0] > 0, Tn[:, 0], np.nan)
    if np.any(ok):
        vals[ok] = np.linalg.solve(An[ok], Tn[ok][..., None])[:, 0, 0]

    fitted = np.empty(n)
    fitted[order] = vals[inverse]
    return LoessFit(span, degree, x, fitted, xs, int(np.sum(~ok)))


@dataclass(frozen=True)
class SplineBasis:
    """Natural cubic spline basis (no intercept column), linear beyond the boundary knots."""

    df: int
    knots: np.ndarray
    boundary: tuple
    basis: np.ndarray

    def evaluate(self, x) -> np.ndarray:
        return _ns_columns(np.asarray(x, dtype=float), self.knots, self.boundary)


def _ns_columns(x, interior, boundary):
    lo, hi = boundary
    span = hi - lo
    knots = (np.concatenate([[lo], interior, [hi]]) - lo) / span
    u = (x - lo) / span
    last = knots[-1]

    def d(k):
        return (np.clip(u - knots[k], 0, None) ** 3 - np.clip(u - last, 0, None) ** 3) / (last - knots[k])

    cols = [u]
    dK = d(len(knots) - 2)
    for k in range(len(knots) - 2):
        cols.append(d(k) - dK)
    return np.column_stack(cols)


def natural_spline_basis(x, df: int = SPLINE_DF) -> SplineBasis:
    """Natural cubic spline basis with ``df`` columns and quantile interior knots."""
    x = np.asarray(x, dtype=float)
    if df < 2:
        raise ValueError("df must be at least 2")
    if np.unique(x).size < df + 1:
        raise TooFewDistinct(f"need at least {df + 1} distinct values for df={df}")
    boundary = (float(x.min()), float(x.max()))
    interior = np.quantile(x, np.linspace(0, 1, df + 1)[1:-1])
    return SplineBasis(df, interior, boundary, _ns_columns(x, interior, boundary))


@dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    fitted: np.ndarray
    deviance: float
    iterations: int
    gradient: np.ndarray


def _check_rank(X, w, what):
    Xs = X[w > 0] * np.sqrt(w[w > 0])[:, None]
    if Xs.shape[0] < X.shape[1] or np.linalg.matrix_rank(Xs) < X.shape[1]:
        raise FitSingular(f"{what}: design matrix is rank deficient")


def _column_scale(X, w):
    sc = np.sqrt((w[:, None] * X ** 2).sum(axis=0) / max(w.sum(), 1e-300))
    return np.where(sc > 0, sc, 1.0)


def weighted_logistic(X, y, w=None, offset=None, max_iter: int = 100, tol: float = 1e-10) -> LogisticFit:
    """Weighted Bernoulli maximum likelihood with a fixed offset, by IRLS."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    pos = w > 0
    ybar = np.sum(w * y) / np.sum(w)
    if ybar <= 0 or ybar >= 1:
        raise DivergedToInfinity("outcome is constant: the intercept diverges",
                                 direction=np.sign(ybar - 0.5) * np.eye(p)[0])
    _check_rank(X, w, "weighted_logistic")
    sc = _column_scale(X, w)
    Xs = X / sc
    beta = np.zeros(p)

    def deviance(b):
        eta = Xs @ b + offset
        return -2.0 * np.sum(w * (y * log_expit(eta) + (1 - y) * log_expit(-eta)))

    dev = deviance(beta)
    trace = [dev]
    for it in range(1, max_iter + 1):
        eta = Xs @ beta + offset
        mu = expit(eta)
        W = w * mu * (1 - mu)
        grad = Xs.T @ (w * (y - mu))
        H = Xs.T @ (W[:, None] * Xs)
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise FitSingular("weighted_logistic: information matrix is singular")
        t = 1.0
        while True:
            new = beta + t * step
            new_dev = deviance(new)
            if new_dev <= dev + 1e-12 * abs(dev) or t < 1e-10:
                break
            t *= 0.5
        beta, old, dev = new, dev, new_dev
        trace.append(dev)
        if np.max(np.abs(Xs @ beta)) > 50:
            raise DivergedToInfinity("linear predictor diverges (separation)",
                                     direction=beta / np.linalg.norm(beta) / sc, trace=trace)
        if abs(old - dev) < tol:
            mu = expit(Xs @ beta + offset)
            grad = X.T @ (w * (y - mu))
            return LogisticFit(beta / sc, mu, dev, it, grad)
    raise FitDiverged(f"weighted_logistic: no convergence in {max_iter} iterations", trace)


@dataclass(frozen=True)
class MultinomialFit:
    """Coefficient blocks for categories 2..K (category 1 is the reference)."""

    coef: list
    fitted: np.ndarray
    deviance: float
    iterations: int
    gradient: np.ndarray
    ridge_used: bool = False


def _multinomial_eta(blocks, coef, offsets):
    return np.column_stack([X @ b + o for X, b, o in zip(blocks, coef, offsets)])


def _multinomial_probs(eta):
    full = np.column_stack([np.zeros(eta.shape[0]), eta])
    return np.exp(full - logsumexp(full, axis=1, keepdims=True))


def multinomial_loglik(blocks, coef, y, w, offsets):
    """Weighted log-likelihood; ``y`` holds categories 1..K."""
    eta = _multinomial_eta(blocks, coef, offsets)
    full = np.column_stack([np.zeros(eta.shape[0]), eta])
    ll = full[np.arange(full.shape[0]), y - 1] - logsumexp(full, axis=1)
    return float(np.sum(w * ll))


def weighted_multinomial(blocks: Sequence[np.ndarray], y, w=None, offsets=None,
                         max_iter: int = 100, tol: float = 1e-10, ridge: float = 1e-6,
                         penalty: Optional[Sequence[np.ndarray]] = None) -> MultinomialFit:
    """Weighted multinomial logistic regression by Newton steps on the full block Hessian.

    ``blocks[k - 2]`` is the design for the log-odds of category ``k`` versus
    category 1. A singular Hessian gets ``ridge`` added to its diagonal for
    the step computation and ``ridge_used`` is set. ``penalty[k - 2]`` holds
    one non-negative number per column of ``blocks[k - 2]``; the deviance is
    augmented by ``sum(penalty * theta**2)`` with ``theta`` the coefficients of
    the columns scaled to unit weighted RMS.
    """
    y = np.asarray(y, dtype=np.int64)
    n = y.size
    Km1 = len(blocks)
    blocks = [np.asarray(X, dtype=float).reshape(n, -1) for X in blocks]
    w = np.ones(n) if w is None else np.asarray(w, dtype=float)
    offsets = [np.zeros(n)] * Km1 if offsets is None else [np.asarray(o, dtype=float) for o in offsets]
    counts = np.bincount(y - 1, weights=w, minlength=Km1 + 1)
    if np.any(counts <= 0):
        missing = np.flatnonzero(counts <= 0) + 1
        raise DivergedToInfinity(f"categories {missing.tolist()} never observed: intercepts diverge")
    for X in blocks:
        _check_rank(X, w, "weighted_multinomial")
    scales = [_column_scale(X, w) for X in blocks]
    Xs = [X / s for X, s in zip(blocks, scales)]
    sizes = [X.shape[1] for X in Xs]
    cuts = np.cumsum([0] + sizes)
    P = cuts[-1]
    theta = np.zeros(P)
    if penalty is None:
        pen = np.zeros(P)
    else:
        pen = np.concatenate([np.broadcast_to(np.asarray(q, dtype=float), (m,)) for q, m in zip(penalty, sizes)])
    Y = np.zeros((n, Km1 + 1))
    Y[np.arange(n), y - 1] = 1.0

    def split(th):
        return [th[cuts[k]:cuts[k + 1]] for k in range(Km1)]

    def dev_of(th):
        return -2.0 * multinomial_loglik(Xs, split(th), y, w, offsets) + np.dot(pen, th * th)

    dev = dev_of(theta)
    trace = [dev]
    ridge_used = False
    for it in range(1, max_iter + 1):
        pi = _multinomial_probs(_multinomial_eta(Xs, split(theta), offsets))
        grad = np.concatenate([Xs[k].T @ (w * (Y[:, k + 1] - pi[:, k + 1])) for k in range(Km1)]) - pen * theta
        H = np.empty((P, P))
        for a in range(Km1):
            for b in range(a, Km1):
                d = w * pi[:, a + 1] * ((a == b) - pi[:, b + 1])
                blk = Xs[a].T @ (d[:, None] * Xs[b])
                H[cuts[a]:cuts[a + 1], cuts[b]:cuts[b + 1]] = blk
                H[cuts[b]:cuts[b + 1], cuts[a]:cuts[a + 1]] = blk.T
        H[np.diag_indices(P)] += pen
        try:
            step = linalg.solve(H, grad, assume_a="pos")
            if not np.all(np.isfinite(step)):
                raise linalg.LinAlgError
        except (linalg.LinAlgError, ValueError):
            ridge_used = True
            step = linalg.solve(H + ridge * np.trace(H) / P * np.eye(P), grad, assume_a="pos")
        t = 1.0
        while True:
            new = theta + t * step
            new_dev = dev_of(new)
            if new_dev <= dev + 1e-12 * abs(dev) or t < 1e-10:
                break
            t *= 0.5
        theta, old, dev = new, dev, new_dev
        trace.append(dev)
        eta = _multinomial_eta(Xs, split(theta), offsets)
        if np.max(np.abs(eta)) > ETA_LIMIT:
            raise DivergedToInfinity("linear predictors diverge (separation)", trace=trace)
        if abs(old - dev) < tol:
            pi = _multinomial_probs(eta)
            grad = np.concatenate([blocks[k].T @ (w * (Y[:, k + 1] - pi[:, k + 1])) for k in range(Km1)])
            coef = [b / s for b, s in zip(split(theta), scales)]
            return MultinomialFit(coef, pi, dev, it, grad, ridge_used)
    raise FitDiverged(f"weighted_multinomial: no convergence in {max_iter} iterations", trace)
