"""Simulation of progressive multistate cohorts with exponential transitions.

Every transition ``j -> k`` has hazard ``exp(beta_trans . z) / scale[j, k]``;
censoring is exponential with hazard ``exp(beta_cens . z) / lambda_cens``.
Scales are in days (mean sojourn under that single cause at ``z = 0``).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Mapping, Optional

import numpy as np
from scipy.special import expit, logit

from .msm_data import Cohort, PredictionMatrix, SubjectHistory, TransitionStructure

HORIZON_DAYS = 2557.0
BLOCK_SIZE = 4096

# Targeted 7-year survival and exponential scale for each transition.
DGM1_TABLE = {
    (1, 2): (0.90, 24267.0),
    (1, 3): (0.80, 11458.0),
    (1, 5): (0.99, 254394.0),
    (2, 4): (0.55, 4277.0),
    (2, 5): (0.95, 49856.0),
    (3, 4): (0.70, 7168.0),
    (3, 5): (0.15, 1348.0),
    (4, 5): (0.05, 853.0),
}

DGM2_TRANSITIONS = [(1, 2), (1, 3), (1, 6), (2, 4), (2, 6), (3, 5), (3, 6), (4, 6), (5, 6)]


@dataclass(frozen=True)
class Scenario:
    name: str
    beta_cens: tuple

    @classmethod
    def named(cls, name: str) -> "Scenario":
        key = name.upper()
        if key == "UIC":
            key = "NIC"
        if key not in SCENARIOS:
            raise ValueError(f"unknown scenario {name!r}; expected one of nic, wic, sic")
        return SCENARIOS[key]


SCENARIOS = {
    "NIC": Scenario("NIC", (0.0, 0.0)),
    "WIC": Scenario("WIC", (0.25, -0.25)),
    "SIC": Scenario("SIC", (1.0, -1.0)),
}


@dataclass(frozen=True)
class DgmConfig:
    structure: TransitionStructure
    scales: tuple
    beta_trans: tuple = (0.5, -0.5)
    beta_cens: tuple = (0.0, 0.0)
    lambda_cens: float = 5005.0
    horizon: float = HORIZON_DAYS

    def __post_init__(self):
        scales = self.scales
        if isinstance(scales, Mapping):
            scales = scales.items()
        scales = tuple(sorted(((int(a), int(b)), float(s)) for (a, b), s in scales))
        object.__setattr__(self, "scales", scales)
        object.__setattr__(self, "beta_trans", tuple(float(b) for b in self.beta_trans))
        object.__setattr__(self, "beta_cens", tuple(float(b) for b in self.beta_cens))
        object.__setattr__(self, "lambda_cens", float(self.lambda_cens))
        if {k for k, _ in scales} != set(self.structure.transitions):
            raise ValueError("every transition needs exactly one scale")
        if any(not s > 0 for _, s in scales):
            raise ValueError("scales must be positive")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if len(self.beta_cens) != len(self.beta_trans):
            raise ValueError("beta_cens and beta_trans must have the same length")
        if not self.lambda_cens > 0:
            raise ValueError("lambda_cens must be positive (inf disables censoring)")

    @property
    def n_covariates(self) -> int:
        return len(self.beta_trans)

    @property
    def scale(self) -> dict:
        return dict(self.scales)

    def rate_matrix(self) -> np.ndarray:
        """Baseline (z = 0) hazards as a K x K matrix, zero diagonal."""
        K = self.structure.n_states
        R = np.zeros((K, K))
        for (a, b), s in self.scales:
            R[a - 1, b - 1] = 1.0 / s
        return R

    def with_scenario(self, scenario: Scenario) -> "DgmConfig":
        return replace(self, beta_cens=tuple(scenario.beta_cens))

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_states": self.structure.n_states,
                "scales": [[a, b, s] for (a, b), s in self.scales],
                "beta_trans": list(self.beta_trans),
                "beta_cens": list(self.beta_cens),
                "lambda_cens": None if math.isinf(self.lambda_cens) else self.lambda_cens,
                "horizon": self.horizon,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "DgmConfig":
        d = json.loads(text)
        scales = {(int(a), int(b)): float(s) for a, b, s in d["scales"]}
        structure = TransitionStructure(int(d["n_states"]), scales.keys())
        lam = d.get("lambda_cens", 5005.0)
        return cls(
            structure=structure,
            scales=scales,
            beta_trans=tuple(d.get("beta_trans", (0.5, -0.5))),
            beta_cens=tuple(d.get("beta_cens", (0.0, 0.0))),
            lambda_cens=math.inf if lam is None else float(lam),
            horizon=float(d.get("horizon", HORIZON_DAYS)),
        )


def dgm1_config(scenario: Optional[Scenario] = None) -> DgmConfig:
    structure = TransitionStructure(5, DGM1_TABLE.keys())
    cfg = DgmConfig(structure, {k: s for k, (_, s) in DGM1_TABLE.items()})
    return cfg if scenario is None else cfg.with_scenario(scenario)


def dgm2_structure() -> TransitionStructure:
    return TransitionStructure(6, DGM2_TRANSITIONS)


def _block_rng(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _max_depth(structure: TransitionStructure) -> int:
    depth = {}
    for j in reversed(structure.topological_order):
        succ = structure.successors(j)
        depth[j] = 0 if not succ else 1 + max(depth[k] for k in succ)
    return depth[1]


def simulate_paths(config: DgmConfig, Z: np.ndarray, rng: np.random.Generator):
    """Uncensored competing-exponential paths for covariate rows ``Z``.

    Returns ``(states, times)``, each ``n x (D + 1)`` where ``D`` is the
    longest route length; once absorbed the last state and time repeat.
    """
    n = Z.shape[0]
    K = config.structure.n_states
    R = config.rate_matrix()
    mult = np.exp(Z @ np.asarray(config.beta_trans))
    state = np.ones(n, dtype=np.int64)
    time = np.zeros(n)
    states, times = [state.copy()], [time.copy()]
    rows = np.arange(n)
    for _ in range(_max_depth(config.structure)):
        E = rng.standard_exponential((n, K))
        rates = R[state - 1] * mult[:, None]
        with np.errstate(divide="ignore"):
            wait = np.where(rates > 0, E / np.where(rates > 0, rates, 1.0), np.inf)
        k = np.argmin(wait, axis=1)
        dt = wait[rows, k]
        moving = np.isfinite(dt)
        state = np.where(moving, k + 1, state)
        time = np.where(moving, time + dt, time)
        states.append(state.copy())
        times.append(time.copy())
    return np.column_stack(states), np.column_stack(times)


def _simulate_block(config: DgmConfig, n: int, rng: np.random.Generator):
    p = config.n_covariates
    Z = rng.standard_normal((n, p))
    if math.isinf(config.lambda_cens):
        C = np.full(n, np.inf)
    else:
        C = rng.standard_exponential(n) * config.lambda_cens / np.exp(Z @ np.asarray(config.beta_cens))
    states, times = simulate_paths(config, Z, rng)
    return Z, C, states, times


def simulate_arrays(config: DgmConfig, n: int, seed: int):
    """Covariates, censoring times and uncensored paths, generated block-wise.

    Each block of ``BLOCK_SIZE`` subjects draws from its own counter-based
    stream keyed by ``(seed, block)``.
    """
    parts = []
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        m = min(BLOCK_SIZE, n - start)
        parts.append(_simulate_block(config, m, _block_rng(seed, 0, b)))
    Z = np.concatenate([p[0] for p in parts])
    C = np.concatenate([p[1] for p in parts])
    states = np.concatenate([p[2] for p in parts])
    times = np.concatenate([p[3] for p in parts])
    return Z, C, states, times


def _histories(structure, Z, C, states, times, first_id=1):
    absorbing = structure.absorbing
    subjects = []
    for i in range(Z.shape[0]):
        path = [(1, 0.0)]
        st, tm = states[i], times[i]
        for d in range(1, st.shape[0]):
            if tm[d] == tm[d - 1]:
                break
            if tm[d] >= C[i]:
                break
            path.append((int(st[d]), float(tm[d])))
        censor = None if path[-1][0] in absorbing else float(C[i])
        subjects.append(SubjectHistory(first_id + i, tuple(path), censor, tuple(Z[i])))
    return subjects


def simulate_cohort(config: DgmConfig, scenario: Optional[Scenario], n: int, seed: int) -> Cohort:
    if n < 1:
        raise ValueError("n must be positive")
    if scenario is not None:
        config = config.with_scenario(scenario)
    Z, C, states, times = simulate_arrays(config, n, seed)
    return Cohort(config.structure, _histories(config.structure, Z, C, states, times))


def occupancy_at(config: DgmConfig, z, t: float, n_paths: int, seed: int) -> np.ndarray:
    """Monte-Carlo state-occupation frequencies at ``t`` for a fixed ``z`` (no censoring)."""
    K = config.structure.n_states
    counts = np.zeros(K)
    z = np.asarray(z, dtype=float)
    for b, start in enumerate(range(0, n_paths, 1 << 17)):
        m = min(1 << 17, n_paths - start)
        states, times = simulate_paths(config, np.tile(z, (m, 1)), _block_rng(seed, 2, b))
        idx = (times <= t).sum(axis=1) - 1
        occ = states[np.arange(m), idx]
        counts += np.bincount(occ - 1, minlength=K)
    return counts / n_paths


def miscalibrate(preds: PredictionMatrix, delta: float) -> PredictionMatrix:
    """Shift every probability by ``delta`` on the logit scale (rows not renormalised)."""
    if delta == 0:
        return preds
    shifted = expit(logit(preds.probs) + delta)
    return PredictionMatrix(preds.horizon, shifted, preds.ids, row_normalized=False, clamped=preds.clamped)


@lru_cache(maxsize=4)
def superpopulation(config: DgmConfig, scenario: Optional[Scenario], n_super: int, seed: int) -> Cohort:
    return simulate_cohort(config, scenario, n_super, seed)


def superpopulation_index(n_super: int, n_sub: int, seed: int, iteration: int) -> np.ndarray:
    if n_sub > n_super:
        raise ValueError("n_sub cannot exceed n_super")
    rng = _block_rng(seed, 1, iteration)
    return np.sort(rng.choice(n_super, size=n_sub, replace=False))


def superpopulation_sample(config: DgmConfig, scenario: Optional[Scenario], n_super: int,
                           n_sub: int, seed: int, iteration: int = 0) -> Cohort:
    """Random subsample without replacement from a cached superpopulation."""
    pop = superpopulation(config, scenario, n_super, seed)
    return pop.take(superpopulation_index(n_super, n_sub, seed, iteration))
