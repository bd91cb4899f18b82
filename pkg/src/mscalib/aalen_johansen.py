"""Aalen-Johansen estimation of state occupation out of state 1.

The estimator is the product integral over observed transition times ``s``
of ``I + dA(s)`` with ``dA_jk(s) = d_jk(s) / Y_j(s)``.  All transitions at a
tied time enter one factor; censorings at ``s`` leave the risk set after the
events at ``s``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyCohort, NoRiskSet
from .msm_data import Cohort, CohortArrays, PredictionMatrix

DEFAULT_GROUPS = 20


@dataclass(frozen=True)
class OccupationEstimate:
    horizon: float
    probs: np.ndarray
    n_events: int
    n_skipped: int = 0


@dataclass(frozen=True)
class RiskGrouping:
    state: int
    n_groups: int
    assignment: np.ndarray

    def members(self, g: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == g)


def _event_table(arr: CohortArrays, t: float):
    """Observed transitions up to ``t`` as (times, from, to) index arrays, time-sorted."""
    subj, j = np.nonzero((arr.dest > 0) & (arr.exit <= t))
    times = arr.exit[subj, j]
    k = arr.dest[subj, j] - 1
    order = np.lexsort((k, j, times))
    return times[order], j[order], k[order], subj[order]


def _risk_counts(arr: CohortArrays, K: int, s: np.ndarray) -> np.ndarray:
    """``Y[m, j]``: subjects at risk in state ``j`` just before time ``s[m]``."""
    Y = np.empty((s.size, K), dtype=np.int64)
    for j in range(K):
        valid = arr.dest[:, j] >= 0
        entry = np.sort(arr.entry[valid, j])
        exit_ = np.sort(arr.exit[valid, j])
        Y[:, j] = np.searchsorted(entry, s, "left") - np.searchsorted(exit_, s, "left")
    return Y


def _aj_arrays(arr: CohortArrays, K: int, t: float) -> OccupationEstimate:
    n = len(arr)
    if n == 0:
        raise EmptyCohort("cohort has no subjects")
    if not np.any(arr.exit[:, 0] > 0):
        raise NoRiskSet("no subject at risk in state 1 at time 0")
    times, j, k, _ = _event_table(arr, t)
    p = np.zeros(K)
    p[0] = 1.0
    if times.size == 0:
        return OccupationEstimate(t, p, 0)
    uniq, start = np.unique(times, return_index=True)
    stop = np.append(start[1:], times.size)
    Y = _risk_counts(arr, K, uniq)
    skipped = 0
    eye = np.eye(K)
    for m in range(uniq.size):
        M = eye.copy()
        for e in range(start[m], stop[m]):
            a, b = j[e], k[e]
            if Y[m, a] == 0:
                skipped += 1
                continue
            M[a, b] += 1.0 / Y[m, a]
            M[a, a] -= 1.0 / Y[m, a]
        p = p @ M
    return OccupationEstimate(t, p, int(uniq.size), skipped)


def aalen_johansen(cohort: Cohort, t: float) -> OccupationEstimate:
    """Estimated ``P(X(t) = k | X(0) = 1)`` for every state ``k``."""
    if len(cohort) == 0:
        raise EmptyCohort("cohort has no subjects")
    return _aj_arrays(cohort.arrays, cohort.n_states, t)


def _aj_loo_arrays(arr: CohortArrays, K: int, t: float) -> np.ndarray:
    n = len(arr)
    times, j, k, subj = _event_table(arr, t)
    P = np.zeros((n, K))
    P[:, 0] = 1.0
    if times.size == 0:
        return P
    uniq, start = np.unique(times, return_index=True)
    stop = np.append(start[1:], times.size)
    Y = _risk_counts(arr, K, uniq)
    for m in range(uniq.size):
        s = uniq[m]
        flows = []
        for e in range(start[m], stop[m]):
            a, b = j[e], k[e]
            if e > start[m] and a == j[e - 1] and b == k[e - 1]:
                continue
            # events of this (a, b) type at s
            same = (j[start[m]:stop[m]] == a) & (k[start[m]:stop[m]] == b)
            d = int(same.sum())
            at_risk = (arr.entry[:, a] < s) & (s <= arr.exit[:, a])
            own = np.zeros(n)
            own[subj[start[m]:stop[m]][same]] = 1.0
            num = d - own
            den = Y[m, a] - at_risk
            with np.errstate(divide="ignore", invalid="ignore"):
                dA = np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)
            flows.append((a, b, P[:, a] * dA))
        for a, b, f in flows:
            P[:, b] += f
            P[:, a] -= f
    return P


def aj_leave_one_out(cohort: Cohort, t: float) -> np.ndarray:
    """Row ``i`` is the estimate on the cohort with subject ``i`` removed.

    Risk sets and event counts are downdated per subject instead of refitting
    ``n`` times.
    """
    if len(cohort) < 2:
        raise EmptyCohort("leave-one-out needs at least two subjects")
    return _aj_loo_arrays(cohort.arrays, cohort.n_states, t)


def aj_leave_one_out_naive(cohort: Cohort, t: float) -> np.ndarray:
    arr = cohort.arrays
    n = len(arr)
    rows = []
    for i in range(n):
        keep = np.delete(np.arange(n), i)
        rows.append(_aj_arrays(arr.take(keep), cohort.n_states, t).probs)
    return np.array(rows)


def make_risk_groups(preds: PredictionMatrix, state: int, n_groups: int) -> RiskGrouping:
    """Split subjects into ``n_groups`` near-equal blocks by ascending ``p_hat[state]``.

    Ties are broken by subject id (row order when the predictions carry no ids).
    """
    n = preds.n
    if not 1 <= n_groups <= n:
        raise ValueError(f"need 1 <= n_groups <= {n}")
    p = preds.probs[:, state - 1]
    if preds.ids is not None:
        id_rank = np.empty(n, dtype=np.int64)
        id_rank[sorted(range(n), key=lambda i: preds.ids[i])] = np.arange(n)
    else:
        id_rank = np.arange(n)
    order = np.lexsort((id_rank, p))
    assignment = np.empty(n, dtype=np.int64)
    for g, block in enumerate(np.array_split(order, n_groups)):
        assignment[block] = g
    return RiskGrouping(state, n_groups, assignment)


def _group_estimates(cohort: Cohort, preds: PredictionMatrix, state: int, n_groups: int):
    grouping = make_risk_groups(preds, state, n_groups)
    arr = cohort.arrays
    out = []
    for g in range(n_groups):
        idx = grouping.members(g)
        est = _aj_arrays(arr.take(idx), cohort.n_states, preds.horizon)
        out.append((idx, est))
    return out


def aj_mean_calibration(cohort: Cohort, preds: PredictionMatrix, state: int,
                        n_groups: int = DEFAULT_GROUPS) -> float:
    """Size-weighted average of within-group AJ estimates minus mean prediction."""
    if len(cohort) != preds.n:
        raise ValueError("cohort and predictions differ in length")
    groups = _group_estimates(cohort, preds, state, n_groups)
    observed = sum(idx.size * est.probs[state - 1] for idx, est in groups) / preds.n
    return float(observed - preds.probs[:, state - 1].mean())


def aj_moderate_points(cohort: Cohort, preds: PredictionMatrix, state: int,
                       n_groups: int = DEFAULT_GROUPS) -> list[tuple[float, float]]:
    groups = _group_estimates(cohort, preds, state, n_groups)
    return [
        (float(preds.probs[idx, state - 1].mean()), float(est.probs[state - 1]))
        for idx, est in groups
    ]
