"""Data model for progressive multistate cohorts and predicted probabilities.

States are 1-indexed throughout. Times are in days.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import (
    CovariateConflict,
    DimensionMismatch,
    IllegalTransition,
    InvalidStructure,
    MalformedHistory,
)

LONG_HEADER = ["id", "from", "to", "tstart", "tstop", "status"]
DEFAULT_EPS = 1e-10


@dataclass(frozen=True)
class TransitionStructure:
    """Directed acyclic state graph of a progressive multistate model."""

    n_states: int
    transitions: frozenset

    def __init__(self, n_states: int, transitions: Iterable[tuple[int, int]]):
        object.__setattr__(self, "n_states", int(n_states))
        object.__setattr__(self, "transitions", frozenset((int(a), int(b)) for a, b in transitions))
        self._validate()

    def _validate(self):
        K = self.n_states
        if K < 2:
            raise InvalidStructure("need at least two states")
        for a, b in self.transitions:
            if not (1 <= a <= K and 1 <= b <= K) or a == b:
                raise InvalidStructure(f"bad transition {a}->{b}")
        if any(b == 1 for _, b in self.transitions):
            raise InvalidStructure("state 1 must have no incoming transitions")
        # Kahn's algorithm doubles as the cycle check
        if len(self.topological_order) != K:
            raise InvalidStructure("transition graph has a cycle")
        reach = {1}
        stack = [1]
        while stack:
            j = stack.pop()
            for k in self.successors(j):
                if k not in reach:
                    reach.add(k)
                    stack.append(k)
        if len(reach) != K:
            missing = sorted(set(range(1, K + 1)) - reach)
            raise InvalidStructure(f"states {missing} unreachable from state 1")

    def successors(self, j: int) -> list[int]:
        return sorted(b for a, b in self.transitions if a == j)

    def is_absorbing(self, j: int) -> bool:
        return not any(a == j for a, _ in self.transitions)

    @cached_property
    def absorbing(self) -> frozenset:
        return frozenset(j for j in range(1, self.n_states + 1) if self.is_absorbing(j))

    @cached_property
    def topological_order(self) -> tuple:
        indeg = {j: 0 for j in range(1, self.n_states + 1)}
        for _, b in self.transitions:
            indeg[b] += 1
        order = []
        ready = sorted(j for j, d in indeg.items() if d == 0)
        while ready:
            j = ready.pop(0)
            order.append(j)
            for k in self.successors(j):
                indeg[k] -= 1
                if indeg[k] == 0:
                    ready.append(k)
            ready.sort()
        return tuple(order)

    def routes(self, start: int, end: int) -> list[tuple[int, ...]]:
        """All state sequences leading from ``start`` to ``end``."""
        if start == end:
            return [(start,)]
        out = []
        for m in self.successors(start):
            out.extend((start,) + r for r in self.routes(m, end))
        return out


@dataclass(frozen=True)
class SubjectHistory:
    id: object
    path: tuple
    censor_time: Optional[float] = None
    covariates: tuple = ()

    def __post_init__(self):
        path = tuple((int(s), float(t)) for s, t in self.path)
        object.__setattr__(self, "path", path)
        object.__setattr__(self, "covariates", tuple(float(z) for z in self.covariates))
        if self.censor_time is not None:
            object.__setattr__(self, "censor_time", float(self.censor_time))
        if not path or path[0] != (1, 0.0):
            raise MalformedHistory(self.id, "path must start with (1, 0.0)")
        for (_, t0), (_, t1) in zip(path, path[1:]):
            if not t1 > t0:
                raise MalformedHistory(self.id, "entry times not strictly increasing")
        if self.censor_time is not None and self.censor_time < path[-1][1]:
            raise MalformedHistory(self.id, "censor time before last entry")

    @property
    def last_state(self) -> int:
        return self.path[-1][0]

    @property
    def last_entry(self) -> float:
        return self.path[-1][1]


def _last_observed(subject: SubjectHistory, structure: TransitionStructure) -> float:
    if structure.is_absorbing(subject.last_state):
        return math.inf
    if subject.censor_time is None:
        return subject.last_entry
    return subject.censor_time


def state_at(subject: SubjectHistory, t: float, structure: TransitionStructure) -> Optional[int]:
    """State occupied at ``t``, or ``None`` when it is not observed.

    A subject absorbed at or before ``t`` is known to be in the absorbing state
    regardless of later censoring. Entering a state exactly at ``t`` counts as
    occupying it at ``t``.
    """
    if t > _last_observed(subject, structure):
        return None
    state = 1
    for s, entry in subject.path:
        if entry > t:
            break
        state = s
    return state


@dataclass(frozen=True)
class Cohort:
    structure: TransitionStructure
    subjects: tuple

    def __init__(self, structure: TransitionStructure, subjects: Sequence[SubjectHistory]):
        object.__setattr__(self, "structure", structure)
        object.__setattr__(self, "subjects", tuple(subjects))
        seen = set()
        p = None
        for s in self.subjects:
            if s.id in seen:
                raise MalformedHistory(s.id, "duplicate id")
            seen.add(s.id)
            for (a, _), (b, _) in zip(s.path, s.path[1:]):
                if (a, b) not in structure.transitions:
                    raise IllegalTransition(s.id, a, b)
            if p is None:
                p = len(s.covariates)
            elif len(s.covariates) != p:
                raise DimensionMismatch(f"subject {s.id!r} has {len(s.covariates)} covariates, expected {p}")

    def __len__(self) -> int:
        return len(self.subjects)

    @property
    def n_states(self) -> int:
        return self.structure.n_states

    @cached_property
    def ids(self) -> tuple:
        return tuple(s.id for s in self.subjects)

    @cached_property
    def covariates(self) -> np.ndarray:
        p = len(self.subjects[0].covariates) if self.subjects else 0
        Z = np.array([s.covariates for s in self.subjects], dtype=float).reshape(len(self), p)
        Z.flags.writeable = False
        return Z

    @cached_property
    def arrays(self) -> "CohortArrays":
        return CohortArrays.from_cohort(self)

    def take(self, index: Sequence[int], relabel: bool = False) -> "Cohort":
        """Sub-cohort of the given positions; ``relabel`` renumbers ids 1..m."""
        subs = [self.subjects[i] for i in index]
        if relabel:
            subs = [
                SubjectHistory(j + 1, s.path, s.censor_time, s.covariates)
                for j, s in enumerate(subs)
            ]
        return Cohort(self.structure, subs)


@dataclass(frozen=True)
class CohortArrays:
    """Dense per-subject, per-state sojourn table used by the estimators.

    ``entry[i, j]`` / ``exit[i, j]`` bound the interval (entry, exit] during
    which subject ``i`` is at risk in state ``j + 1``; ``dest[i, j]`` is the
    state entered at ``exit`` (0 if censored, -1 if the state was never at risk).
    """

    entry: np.ndarray
    exit: np.ndarray
    dest: np.ndarray
    last_observed: np.ndarray
    absorb_time: np.ndarray
    absorb_state: np.ndarray

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "CohortArrays":
        n, K = len(cohort), cohort.n_states
        st = cohort.structure
        entry = np.full((n, K), np.inf)
        exit_ = np.full((n, K), -np.inf)
        dest = np.full((n, K), -1, dtype=np.int64)
        last_obs = np.empty(n)
        absorb_time = np.full(n, np.nan)
        absorb_state = np.zeros(n, dtype=np.int64)
        for i, s in enumerate(cohort.subjects):
            path = s.path
            for (a, ta), (b, tb) in zip(path, path[1:]):
                entry[i, a - 1] = ta
                exit_[i, a - 1] = tb
                dest[i, a - 1] = b
            a, ta = path[-1]
            if st.is_absorbing(a):
                absorb_time[i] = ta
                absorb_state[i] = a
                last_obs[i] = np.inf
            else:
                end = ta if s.censor_time is None else s.censor_time
                entry[i, a - 1] = ta
                exit_[i, a - 1] = end
                dest[i, a - 1] = 0
                last_obs[i] = end
        out = cls(entry, exit_, dest, last_obs, absorb_time, absorb_state)
        for arr in (entry, exit_, dest, last_obs, absorb_time, absorb_state):
            arr.flags.writeable = False
        return out

    def take(self, index) -> "CohortArrays":
        return CohortArrays(
            self.entry[index], self.exit[index], self.dest[index],
            self.last_observed[index], self.absorb_time[index], self.absorb_state[index],
        )

    def __len__(self):
        return self.entry.shape[0]


@dataclass(frozen=True)
class PredictionMatrix:
    horizon: float
    probs: np.ndarray
    ids: Optional[tuple] = None
    row_normalized: bool = True
    clamped: bool = False

    def __post_init__(self):
        probs = np.array(self.probs, dtype=float, copy=True)
        if probs.ndim != 2 or probs.shape[1] < 2:
            raise DimensionMismatch("probs must be an n x K matrix with K >= 2")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if self.ids is not None:
            object.__setattr__(self, "ids", tuple(self.ids))
            if len(self.ids) != probs.shape[0]:
                raise DimensionMismatch("ids and probs have different lengths")
        probs.flags.writeable = False
        object.__setattr__(self, "probs", probs)

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_states(self) -> int:
        return self.probs.shape[1]

    def take(self, index) -> "PredictionMatrix":
        ids = None if self.ids is None else tuple(self.ids[i] for i in index)
        return PredictionMatrix(self.horizon, self.probs[index], ids, self.row_normalized, self.clamped)


def clamp_predictions(m: PredictionMatrix, eps: float = DEFAULT_EPS) -> PredictionMatrix:
    """Clip every probability into ``[eps, 1 - eps]``."""
    if not 0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")
    clipped = np.clip(m.probs, eps, 1.0 - eps)
    changed = bool(np.any(clipped != m.probs))
    return PredictionMatrix(m.horizon, clipped, m.ids, m.row_normalized, m.clamped or changed)


def horizon_states(cohort: Cohort, t: float) -> np.ndarray:
    """Vector of occupied states at ``t`` (0 where unknown)."""
    arr = cohort.arrays
    K = cohort.n_states
    out = np.zeros(len(cohort), dtype=np.int64)
    known = t <= arr.last_observed
    for j in range(K):
        in_j = (arr.entry[:, j] <= t) & (t < arr.exit[:, j])
        # the last, non-absorbing state is occupied through its exit (censoring) time
        in_j |= (arr.entry[:, j] <= t) & (t <= arr.exit[:, j]) & (arr.dest[:, j] == 0)
        out[in_j & known] = j + 1
    absorbed = ~np.isnan(arr.absorb_time) & (arr.absorb_time <= t)
    out[absorbed] = arr.absorb_state[absorbed]
    return out


def indicator_matrix(cohort: Cohort, t: float) -> tuple[np.ndarray, np.ndarray]:
    """Inclusion flags and one-hot state indicators at horizon ``t``."""
    states = horizon_states(cohort, t)
    included = states > 0
    ind = np.zeros((len(cohort), cohort.n_states), dtype=np.int64)
    rows = np.flatnonzero(included)
    ind[rows, states[rows] - 1] = 1
    return included, ind


def parse_long_format(text: str, structure: TransitionStructure) -> Cohort:
    """Decode long-format CSV (one row per at-risk interval) into a Cohort."""
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if header[:6] != LONG_HEADER:
        raise ValueError(f"expected header starting with {','.join(LONG_HEADER)}")
    zcols = header[6:]
    rows_by_id: dict = {}
    order = []
    for row in reader:
        if not row or all(not c.strip() for c in row):
            continue
        sid = _parse_id(row[0].strip())
        rec = (int(row[1]), int(row[2]), float(row[3]), float(row[4]), int(row[5]),
               tuple(float(v) for v in row[6:6 + len(zcols)]))
        if sid not in rows_by_id:
            rows_by_id[sid] = []
            order.append(sid)
        rows_by_id[sid].append(rec)

    subjects = []
    for sid in order:
        recs = sorted(rows_by_id[sid], key=lambda r: r[2])
        z = recs[0][5]
        if any(r[5] != z for r in recs):
            raise CovariateConflict(sid)
        path = [(1, 0.0)]
        censor = None
        for idx, (a, b, t0, t1, status, _) in enumerate(recs):
            if (a, b) not in structure.transitions:
                raise IllegalTransition(sid, a, b)
            cur_state, cur_time = path[-1]
            if a != cur_state or t0 != cur_time:
                raise MalformedHistory(sid, "rows are not contiguous")
            if status not in (0, 1):
                raise MalformedHistory(sid, f"bad status {status}")
            if t1 < t0 or (status == 1 and t1 == t0):
                raise MalformedHistory(sid, "tstop before tstart")
            if status == 1:
                path.append((b, t1))
            else:
                if idx != len(recs) - 1:
                    raise MalformedHistory(sid, "censored row followed by more rows")
                censor = t1
        last = path[-1][0]
        if censor is None and not structure.is_absorbing(last):
            censor = path[-1][1]
        subjects.append(SubjectHistory(sid, tuple(path), censor, z))
    return Cohort(structure, subjects)


def _parse_id(raw: str):
    try:
        return int(raw)
    except ValueError:
        return raw


def _fmt(x: float) -> str:
    return repr(float(x))


def to_long_format(cohort: Cohort) -> str:
    """Inverse of :func:`parse_long_format`."""
    p = cohort.covariates.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LONG_HEADER + [f"z{j + 1}" for j in range(p)])
    st = cohort.structure
    for s in cohort.subjects:
        z = [_fmt(v) for v in s.covariates]
        for (a, ta), (b, tb) in zip(s.path, s.path[1:]):
            w.writerow([s.id, a, b, _fmt(ta), _fmt(tb), 1] + z)
        a, ta = s.path[-1]
        if not st.is_absorbing(a) and s.censor_time is not None:
            if s.censor_time == ta and len(s.path) > 1:
                continue  # follow-up ended on entry; parse restores this censor time
            w.writerow([s.id, a, st.successors(a)[0], _fmt(ta), _fmt(s.censor_time), 0] + z)
    return buf.getvalue()


def read_predictions(text: str, horizon: float) -> PredictionMatrix:
    """Parse an ``id,p1,...,pK`` CSV."""
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if header[0] != "id" or header[1:] != [f"p{k}" for k in range(1, len(header))]:
        raise ValueError("prediction header must be id,p1,...,pK")
    ids, rows = [], []
    for row in reader:
        if not row:
            continue
        ids.append(_parse_id(row[0].strip()))
        rows.append([float(v) for v in row[1:]])
    return PredictionMatrix(horizon, np.array(rows, dtype=float), tuple(ids))


def write_predictions(m: PredictionMatrix, ids: Optional[Sequence] = None) -> str:
    ids = ids if ids is not None else (m.ids if m.ids is not None else range(1, m.n + 1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + [f"p{k}" for k in range(1, m.n_states + 1)])
    for sid, row in zip(ids, m.probs):
        w.writerow([sid] + [_fmt(v) for v in row])
    return buf.getvalue()


def align_predictions(cohort: Cohort, preds: PredictionMatrix) -> PredictionMatrix:
    """Reorder ``preds`` to match cohort order by id.

    Raises
    ------
    KeyError
        With the list of offending ids when the two id sets differ.
    """
    if preds.ids is None:
        if preds.n != len(cohort):
            raise DimensionMismatch("prediction rows do not match cohort size")
        return preds
    pos = {sid: i for i, sid in enumerate(preds.ids)}
    missing = [sid for sid in cohort.ids if sid not in pos]
    extra = sorted(set(pos) - set(cohort.ids), key=str)
    if missing or extra:
        raise KeyError((missing + extra)[:10])
    index = [pos[sid] for sid in cohort.ids]
    return preds.take(index)
