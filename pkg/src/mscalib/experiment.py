"""Large- and small-sample simulation studies of the calibration methods.

Desk-scale defaults (``n = 20000`` for the large-sample study, a 100,000
subject superpopulation and 200 iterations for the small-sample study) keep
runs to minutes; :data:`PAPER_SCALE` holds the full-size settings.
"""
from __future__ import annotations

import csv
import io
import json
import math
import multiprocessing
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy
from scipy.special import expit, logit

from . import __version__
from . import calibration as cal
from . import dgm, ipcw, truth
from .errors import EmptyBand, MscalibError
from .msm_data import Cohort, PredictionMatrix

PREDICTION_SHIFT = {"perfect": 0.0, "over": 0.5, "under": -0.5}
WEIGHT_VARIANTS = ("estimated", "misspecified", "true", "none")

DESK_SCALE = {"n_large": 20000, "n_super": 100000, "n_small": 3000, "iterations": 200}
PAPER_SCALE = {"n_large": 200000, "n_super": 1000000, "n_small": 3000, "iterations": 1000}


@dataclass(frozen=True)
class ExperimentSpec:
    scenario: str = "NIC"
    n: int = DESK_SCALE["n_large"]
    iterations: int = 1
    methods: tuple = cal.METHODS
    prediction_variant: str = "perfect"
    weight_variant: str = "estimated"
    n_groups: int = 20
    seed: int = 1
    n_super: int = DESK_SCALE["n_super"]
    cap: float = math.inf
    bootstrap: int = 0

    def __post_init__(self):
        dgm.Scenario.named(self.scenario)
        if self.prediction_variant not in PREDICTION_SHIFT:
            raise ValueError(f"prediction_variant must be one of {sorted(PREDICTION_SHIFT)}")
        if self.weight_variant not in WEIGHT_VARIANTS:
            raise ValueError(f"weight_variant must be one of {WEIGHT_VARIANTS}")
        bad = set(m.upper() for m in self.methods) - set(cal.METHODS)
        if bad:
            raise ValueError(f"unknown methods {sorted(bad)}")
        if self.iterations < 1 or self.n < 1:
            raise ValueError("n and iterations must be positive")
        if 0 < self.bootstrap < 50:
            raise ValueError("bootstrap replicates must be 0 (off) or at least 50")

    @property
    def config(self) -> dgm.DgmConfig:
        return dgm.dgm1_config(dgm.Scenario.named(self.scenario))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["cap"] = None if math.isinf(self.cap) else self.cap
        return d


@dataclass(frozen=True)
class BiasRow:
    method: str
    state: int
    bias: float
    se: Optional[float] = None
    median_bias: Optional[float] = None
    pct_2_5: Optional[float] = None
    pct_97_5: Optional[float] = None
    failures: int = 0
    runs: int = 1


@dataclass
class BiasReport:
    rows: list = field(default_factory=list)

    def get(self, method: str, state: int) -> BiasRow:
        for r in self.rows:
            if r.method == method and r.state == state:
                return r
        raise KeyError((method, state))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "state", "bias", "se", "median_bias", "pct_2_5", "pct_97_5",
                    "failures", "runs"])
        for r in self.rows:
            w.writerow([r.method, r.state, _fmt(r.bias), _fmt(r.se), _fmt(r.median_bias),
                        _fmt(r.pct_2_5), _fmt(r.pct_97_5), r.failures, r.runs])
        return buf.getvalue()


def _fmt(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


# -- single validation cohort -----------------------------------------------------

def make_predictions(truths: PredictionMatrix, variant: str) -> PredictionMatrix:
    return dgm.miscalibrate(truths, PREDICTION_SHIFT[variant])


def shift_reference(predicted, delta: float) -> np.ndarray:
    """True probability behind a prediction shifted by ``delta`` on the logit scale."""
    return expit(logit(np.asarray(predicted, dtype=float)) - delta)


def make_weights(cohort: Cohort, config: dgm.DgmConfig, variant: str, t: float,
                 cap: float = math.inf) -> ipcw.WeightVector:
    if variant == "estimated":
        return ipcw.estimated_weights(cohort, t, cap)
    if variant == "misspecified":
        return ipcw.misspecified_weights(cohort, t, cap)
    if variant == "true":
        return ipcw.true_weights(cohort, config, t, cap)
    if variant == "none":
        return ipcw.unit_weights(cohort, t)
    raise ValueError(f"unknown weight variant {variant!r}")


def _weight_fn(config, variant, t, cap):
    def fn(cohort):
        return make_weights(cohort, config, variant, t, cap)
    return fn


def compare_curves(x, observed, reference, band: tuple = (5.0, 95.0)) -> float:
    """Largest ``|observed - reference|`` over abscissae inside the percentile band of ``x``."""
    lo, hi = band
    if not 0 <= lo < hi <= 100:
        raise ValueError("band must satisfy 0 <= lo < hi <= 100")
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        raise EmptyBand("no points to compare")
    a, b = np.percentile(x, [lo, hi])
    inside = (x >= a) & (x <= b)
    if not inside.any():
        raise EmptyBand(f"no abscissae within the {lo}-{hi} percentile band")
    diff = np.asarray(observed, dtype=float)[inside] - np.asarray(reference, dtype=float)[inside]
    return float(np.max(np.abs(diff)))


def curve_deviation(result: cal.CalibrationResult, estimand: truth.Estimand,
                    band: tuple = (5.0, 95.0)) -> float:
    ref = truth.true_curve_reference(estimand, result.predicted, result.state)
    return compare_curves(result.predicted, result.observed, ref.y, band)


@dataclass
class LargeSampleResult:
    spec: ExperimentSpec
    curves: dict
    estimand: truth.Estimand
    report: BiasReport
    failures: dict


def run_large_sample(spec: ExperimentSpec, moderate: bool = True) -> LargeSampleResult:
    """Simulate one validation cohort, apply every method and compare to the estimand."""
    if spec.iterations != 1:
        raise ValueError("the large-sample study uses a single iteration")
    config = spec.config
    t = config.horizon
    cohort = dgm.simulate_cohort(config, None, spec.n, spec.seed)
    truths = truth.true_predictions(config, cohort, t)
    preds = make_predictions(truths, spec.prediction_variant)
    estimand = truth.compute_estimand(preds, truths)
    target = estimand.mean
    weights = make_weights(cohort, config, spec.weight_variant, t, spec.cap)
    K = cohort.n_states
    curves, failures, rows = {}, {}, []
    for method in (m.upper() for m in spec.methods):
        try:
            res = cal.assess(method, cohort, preds, weights, n_groups=spec.n_groups, moderate=moderate)
        except MscalibError as exc:
            failures[method] = str(exc)
            rows.extend(BiasRow(method, k, math.nan, failures=1) for k in range(1, K + 1))
            continue
        se = [None] * K
        if spec.bootstrap:
            stat = cal.mean_calibration_statistic(method, cohort, preds,
                                                  _weight_fn(config, spec.weight_variant, t, spec.cap),
                                                  spec.n_groups)
            try:
                se = list(cal.bootstrap_se(stat, len(cohort), spec.bootstrap, spec.seed))
            except MscalibError as exc:
                failures[f"{method} bootstrap"] = str(exc)
        for k in range(1, K + 1):
            curves[(method, k)] = res[k]
            mc = res[k].mean_calibration
            rows.append(BiasRow(method, k, mc - target[k - 1], se[k - 1], failures=int(not math.isfinite(mc))))
    return LargeSampleResult(spec, curves, estimand, BiasReport(rows), failures)


# -- small-sample study -------------------------------------------------------------

_POP_CACHE: dict = {}


def _population(spec: ExperimentSpec):
    key = (spec.scenario, spec.n_super, spec.seed)
    if key not in _POP_CACHE:
        config = spec.config
        pop = dgm.superpopulation(config, None, spec.n_super, spec.seed)
        truths = truth.true_transition_probs(config, pop.covariates, config.horizon)
        _POP_CACHE.clear()
        _POP_CACHE[key] = (pop, truths)
    return _POP_CACHE[key]


def small_sample_iteration(spec: ExperimentSpec, iteration: int) -> np.ndarray:
    """Bias of the mean calibration for every (method, state) in one iteration;
    failed cells are NaN. Rows follow ``spec.methods``."""
    config = spec.config
    t = config.horizon
    pop, pop_truths = _population(spec)
    idx = dgm.superpopulation_index(spec.n_super, spec.n, spec.seed, iteration)
    cohort = pop.take(idx)
    truths = PredictionMatrix(t, pop_truths[idx], cohort.ids)
    preds = make_predictions(truths, spec.prediction_variant)
    target = truth.compute_estimand(preds, truths).mean
    K = cohort.n_states
    out = np.full((len(spec.methods), K), np.nan)
    try:
        weights = make_weights(cohort, config, spec.weight_variant, t, spec.cap)
    except MscalibError:
        weights = None
    for r, method in enumerate(m.upper() for m in spec.methods):
        if weights is None and method in ("BLR", "MLR"):
            continue
        try:
            res = cal.assess(method, cohort, preds, weights, n_groups=spec.n_groups, moderate=False)
        except MscalibError:
            continue
        out[r] = [res[k].mean_calibration for k in range(1, K + 1)] - target
    return out


def _run_iteration(args):
    spec, i = args
    return small_sample_iteration(spec, i)


def run_small_sample(spec: ExperimentSpec, workers: int = 1) -> BiasReport:
    """Repeated subsampling from a superpopulation; mean calibration only.

    Iterations are independent and seeded by index, so the report does not
    depend on ``workers``.
    """
    if spec.iterations < 2:
        raise ValueError("the small-sample study needs at least two iterations")
    tasks = [(spec, i) for i in range(spec.iterations)]
    _population(spec)
    if workers > 1:
        # forked workers inherit the cached superpopulation and its truths
        ctx = multiprocessing.get_context("fork" if "fork" in multiprocessing.get_all_start_methods() else None)
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            results = list(pool.map(_run_iteration, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    else:
        results = [_run_iteration(a) for a in tasks]
    arr = np.stack(results)  # iterations x methods x K
    rows = []
    for r, method in enumerate(m.upper() for m in spec.methods):
        for k in range(arr.shape[2]):
            vals = arr[:, r, k]
            ok = vals[np.isfinite(vals)]
            if ok.size:
                med = float(np.median(ok))
                lo, hi = np.percentile(ok, [2.5, 97.5])
                rows.append(BiasRow(method, k + 1, float(ok.mean()), None, med, float(lo), float(hi),
                                    int(vals.size - ok.size), int(vals.size)))
            else:
                rows.append(BiasRow(method, k + 1, math.nan, failures=int(vals.size), runs=int(vals.size)))
    return BiasReport(rows)


# -- output -----------------------------------------------------------------------

def curve_csv(result: cal.CalibrationResult, reference: Optional[np.ndarray] = None) -> str:
    """``state,predicted,observed[,true]``; the predicted column doubles as the rug."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["state", "predicted", "observed"] + (["true"] if reference is not None else [])
    w.writerow(header)
    for i, (x, y) in enumerate(zip(result.predicted, result.observed)):
        row = [result.state, repr(float(x)), repr(float(y))]
        if reference is not None:
            row.append(repr(float(reference[i])))
        w.writerow(row)
    return buf.getvalue()


def versions() -> dict:
    return {"mscalib": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_large_sample(result: LargeSampleResult, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    path = os.path.join(out_dir, "bias_report.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(result.report.to_csv())
    paths.append(path)
    for (method, k), res in sorted(result.curves.items()):
        if res.predicted.size == 0:
            continue
        ref = truth.true_curve_reference(result.estimand, res.predicted, k).y
        path = os.path.join(out_dir, f"curve_{method}_{k}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(curve_csv(res, ref))
        paths.append(path)
    return paths


def write_small_sample(report: BiasReport, out_dir: str) -> list:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "bias_report.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(report.to_csv())
    return [path]


def manifest(spec: ExperimentSpec, outputs: list, study: str, paper_scale: bool = False) -> dict:
    return {
        "study": study,
        "spec": spec.to_dict(),
        "seed": spec.seed,
        "scale": "paper" if paper_scale else "desk",
        "desk_scale_defaults": DESK_SCALE,
        "paper_scale": PAPER_SCALE,
        "outputs": [os.path.basename(p) for p in outputs],
        "versions": versions(),
    }


def write_manifest(data: dict, out_dir: str) -> str:
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path
