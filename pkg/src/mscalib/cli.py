"""Command-line interface: ``mscalib {simulate,calibrate,truth,experiment}``.

Exit codes: 0 success, 2 usage or configuration error, 3 data integrity
error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import calibration as cal
from . import dgm, experiment, ipcw, truth
from .errors import (
    CovariateConflict,
    DimensionMismatch,
    EmptyCohort,
    IllegalTransition,
    InvalidStructure,
    MalformedHistory,
    MscalibError,
)
from .msm_data import (
    Cohort,
    TransitionStructure,
    align_predictions,
    parse_long_format,
    read_predictions,
    to_long_format,
)
from .svg import calibration_svg

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
DATA_ERRORS = (MalformedHistory, IllegalTransition, CovariateConflict, DimensionMismatch, EmptyCohort)


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


# -- manifest and IO helpers ----------------------------------------------------------

def _digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write(path: str, text: str) -> str:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path


def _read(path: str) -> str:
    try:
        with open(path, encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc.strerror}", EXIT_USAGE)


def write_run_manifest(out_dir: str, subcommand: str, config: dict, seed, inputs: Sequence[str],
                       outputs: Sequence[str], extra: Optional[dict] = None) -> str:
    """One manifest per output directory; the only file carrying a timestamp."""
    data = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "inputs": {os.path.basename(p): _digest(p) for p in inputs},
        "outputs": sorted(os.path.basename(p) for p in outputs),
        "version": __version__,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }
    if extra:
        data.update(extra)
    return _write(os.path.join(out_dir, "manifest.json"), json.dumps(data, indent=2, sort_keys=True) + "\n")


def _load_config(path: Optional[str]) -> dgm.DgmConfig:
    if path is None:
        return dgm.dgm1_config()
    try:
        return dgm.DgmConfig.from_json(_read(path))
    except (ValueError, KeyError, TypeError, InvalidStructure) as exc:
        raise CliError(f"invalid config {path}: {exc}", EXIT_USAGE)


def _parse_structure(text: str) -> TransitionStructure:
    try:
        pairs = [tuple(int(v) for v in item.split(">")) for item in text.split(",") if item.strip()]
        K = max(max(p) for p in pairs)
        return TransitionStructure(K, pairs)
    except (ValueError, InvalidStructure) as exc:
        raise CliError(f"invalid --structure {text!r}: {exc}", EXIT_USAGE)


def _covariate_csv(cohort: Cohort) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    Z = cohort.covariates
    w.writerow(["id"] + [f"z{j + 1}" for j in range(Z.shape[1])])
    for sid, row in zip(cohort.ids, Z):
        w.writerow([sid] + [repr(float(v)) for v in row])
    return buf.getvalue()


def _read_covariates(text: str):
    reader = csv.reader(io.StringIO(text))
    header = [h.strip() for h in next(reader)]
    if header[0] != "id":
        raise CliError("covariate CSV must start with an id column", EXIT_DATA)
    ids, rows = [], []
    for row in reader:
        if row:
            ids.append(row[0].strip())
            rows.append([float(v) for v in row[1:]])
    return ids, np.array(rows, dtype=float).reshape(len(ids), len(header) - 1)


# -- subcommands -----------------------------------------------------------------------

def cmd_simulate(args) -> int:
    config = _load_config(args.config)
    scenario = dgm.Scenario.named(args.scenario)
    cohort = dgm.simulate_cohort(config, scenario, args.n, args.seed)
    os.makedirs(args.out, exist_ok=True)
    outputs = [
        _write(os.path.join(args.out, "cohort.csv"), to_long_format(cohort)),
        _write(os.path.join(args.out, "covariates.csv"), _covariate_csv(cohort)),
    ]
    inputs = [args.config] if args.config else []
    write_run_manifest(args.out, "simulate", json.loads(config.with_scenario(scenario).to_json()),
                       args.seed, inputs, outputs, {"scenario": scenario.name, "n": args.n})
    return EXIT_OK


def _summary_csv(results: dict, se: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "state", "mean_calibration", "se", "intercept", "slope"])
    for (method, k), res in results.items():
        s = se.get((method, k))
        w.writerow([method, k, repr(float(res.mean_calibration)),
                    "" if s is None else repr(float(s)),
                    "" if res.intercept is None else repr(float(res.intercept)),
                    "" if res.slope is None else repr(float(res.slope))])
    return buf.getvalue()


def _calibrate_weights(args, cohort, t):
    if args.weights == "estimated":
        return ipcw.estimated_weights(cohort, t, args.cap), lambda c: ipcw.estimated_weights(c, t, args.cap)
    if args.weights == "none":
        return ipcw.unit_weights(cohort, t), lambda c: ipcw.unit_weights(c, t)
    w = ipcw.weights_from_csv(_read(args.weights), cohort, args.cap)
    return w, None


def cmd_calibrate(args) -> int:
    structure = _parse_structure(args.structure)
    data_text = _read(args.data)
    pred_text = _read(args.pred)
    try:
        cohort = parse_long_format(data_text, structure)
        preds = read_predictions(pred_text, args.horizon)
    except DATA_ERRORS as exc:
        raise CliError(str(exc), EXIT_DATA)
    except ValueError as exc:
        raise CliError(f"cannot parse input: {exc}", EXIT_DATA)
    if preds.n_states != structure.n_states:
        raise CliError(f"predictions have {preds.n_states} states, structure has {structure.n_states}", EXIT_DATA)
    try:
        preds = align_predictions(cohort, preds)
    except KeyError as exc:
        offenders = exc.args[0]
        raise CliError("ids differ between data and predictions: " + ", ".join(map(str, offenders)), EXIT_DATA)
    try:
        weights, weight_fn = _calibrate_weights(args, cohort, args.horizon)
    except KeyError as exc:
        raise CliError("ids missing from weights file: " + ", ".join(map(str, exc.args[0])), EXIT_DATA)
    except MscalibError as exc:
        raise CliError(f"censoring model failed: {exc}", EXIT_NUMERIC)

    methods = cal.METHODS if args.method == "all" else (args.method.upper(),)
    os.makedirs(args.out, exist_ok=True)
    outputs, results, se, failed = [], {}, {}, []
    for method in methods:
        try:
            res = cal.assess(method, cohort, preds, weights, n_groups=args.groups, span=args.span)
        except MscalibError as exc:
            failed.append(f"{method}: {exc}")
            continue
        if args.bootstrap:
            stat = cal.mean_calibration_statistic(method, cohort, preds,
                                                  weight_fn if method in ("BLR", "MLR") else None,
                                                  args.groups)
            try:
                ses = cal.bootstrap_se(stat, len(cohort), args.bootstrap, args.seed)
                se.update({(method, k): ses[k - 1] for k in res})
            except MscalibError as exc:
                failed.append(f"{method} bootstrap: {exc}")
        for k, r in res.items():
            results[(method, k)] = r
            outputs.append(_write(os.path.join(args.out, f"curve_{method}_{k}.csv"), experiment.curve_csv(r)))
            if args.svg:
                outputs.append(_write(os.path.join(args.out, f"curve_{method}_{k}.svg"),
                                      calibration_svg(r.predicted, r.observed, f"{method} state {k}",
                                                      scatter=method in ("MLR", "AJ"))))
    outputs.append(_write(os.path.join(args.out, "summary.csv"), _summary_csv(results, se)))
    cfg = {k: getattr(args, k) for k in ("horizon", "method", "groups", "span", "weights", "cap",
                                          "structure", "bootstrap")}
    cfg["cap"] = None if math.isinf(args.cap) else args.cap
    write_run_manifest(args.out, "calibrate", cfg, args.seed,
                       [args.data, args.pred] + ([args.weights] if os.path.isfile(args.weights) else []),
                       outputs, {"failures": failed})
    for msg in failed:
        print(f"mscalib: {msg}", file=sys.stderr)
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_truth(args) -> int:
    config = _load_config(args.config)
    ids, Z = _read_covariates(_read(args.covariates))
    if Z.shape[1] != config.n_covariates:
        raise CliError(f"expected {config.n_covariates} covariates, found {Z.shape[1]}", EXIT_DATA)
    t = config.horizon if args.horizon is None else args.horizon
    probs = truth.true_transition_probs(config, Z, t)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id"] + [f"p{k}" for k in range(1, probs.shape[1] + 1)])
    for sid, row in zip(ids, probs):
        w.writerow([sid] + [repr(float(v)) for v in row])
    os.makedirs(args.out, exist_ok=True)
    out = _write(os.path.join(args.out, "truth.csv"), buf.getvalue())
    inputs = [args.covariates] + ([args.config] if args.config else [])
    write_run_manifest(args.out, "truth", json.loads(config.to_json()), None, inputs, [out], {"horizon": t})
    return EXIT_OK


def _estimate_minutes(small: bool, n: int, n_super: int, iterations: int, workers: int) -> float:
    if small:
        return (n_super * 2.5e-4 + iterations * 0.25 * n / 3000 / max(workers, 1)) / 60
    return n * 1.5e-3 / 60


def cmd_experiment(args) -> int:
    scale = experiment.PAPER_SCALE if args.paper_scale else experiment.DESK_SCALE
    small = args.small
    n = args.n or (scale["n_small"] if small else scale["n_large"])
    iterations = args.iterations or (scale["iterations"] if small else 1)
    n_super = args.n_super or scale["n_super"]
    methods = tuple(m.upper() for m in args.methods.split(",")) if args.methods else (
        ("AJ", "BLR", "MLR") if small else cal.METHODS)
    workers = max(1, min(args.threads or os.cpu_count() or 1, os.cpu_count() or 1))
    try:
        spec = experiment.ExperimentSpec(
            scenario=args.scenario.upper(), n=n, iterations=iterations, methods=methods,
            prediction_variant=args.prediction, weight_variant=args.weights, n_groups=args.groups,
            seed=args.seed, n_super=n_super, cap=args.cap, bootstrap=args.bootstrap)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_USAGE)
    if args.paper_scale:
        minutes = _estimate_minutes(small, n, n_super, iterations, workers)
        print(f"mscalib: warning: paper-scale run, estimated runtime about {minutes:.0f} minutes "
              f"on {workers} worker(s)", file=sys.stderr)
    os.makedirs(args.out, exist_ok=True)
    if small:
        report = experiment.run_small_sample(spec, workers=workers)
        outputs = experiment.write_small_sample(report, args.out)
    else:
        result = experiment.run_large_sample(spec)
        outputs = experiment.write_large_sample(result, args.out)
        if args.svg:
            for (method, k), res in sorted(result.curves.items()):
                if res.predicted.size:
                    ref = truth.true_curve_reference(result.estimand, res.predicted, k).y
                    outputs.append(_write(os.path.join(args.out, f"curve_{method}_{k}.svg"),
                                          calibration_svg(res.predicted, res.observed, f"{method} state {k}",
                                                          scatter=method in ("MLR", "AJ"), reference=ref)))
        for method, msg in sorted(result.failures.items()):
            print(f"mscalib: {method}: {msg}", file=sys.stderr)
    data = experiment.manifest(spec, outputs, "small" if small else "large", args.paper_scale)
    data["created"] = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
    data["workers"] = workers
    experiment.write_manifest(data, args.out)
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mscalib", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"mscalib {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="simulate a cohort")
    s.add_argument("--config", help="DgmConfig JSON (default: five-state model)")
    s.add_argument("--scenario", type=str.lower, choices=["nic", "uic", "wic", "sic"], default="nic")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=1)
    s.add_argument("--out", default=".")
    s.set_defaults(func=cmd_simulate)

    c = sub.add_parser("calibrate", help="assess calibration of predictions")
    c.add_argument("--data", required=True, help="long-format cohort CSV")
    c.add_argument("--pred", required=True, help="prediction CSV id,p1..pK")
    c.add_argument("--horizon", type=float, required=True)
    c.add_argument("--method", type=str.lower, choices=["aj", "pv", "blr", "mlr", "all"], default="all")
    c.add_argument("--groups", type=int, default=20)
    c.add_argument("--span", type=float, default=0.75)
    c.add_argument("--weights", default="estimated", help="estimated, none, or a CSV id,weight")
    c.add_argument("--cap", type=float, default=ipcw.DEFAULT_CAP)
    c.add_argument("--structure", default=",".join(f"{a}>{b}" for a, b in dgm.DGM1_TABLE),
                   help="transitions as 'a>b,...' (default: five-state model)")
    c.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates for SEs (0 = off)")
    c.add_argument("--seed", type=int, default=1)
    c.add_argument("--svg", action="store_true")
    c.add_argument("--out", default=".")
    c.set_defaults(func=cmd_calibrate)

    t = sub.add_parser("truth", help="true transition probabilities for given covariates")
    t.add_argument("--config", help="DgmConfig JSON (default: five-state model)")
    t.add_argument("--covariates", required=True, help="CSV id,z1..zp")
    t.add_argument("--horizon", type=float)
    t.add_argument("--out", default=".")
    t.set_defaults(func=cmd_truth)

    e = sub.add_parser("experiment", help="run a simulation study")
    e.add_argument("--scenario", type=str.lower, choices=["nic", "uic", "wic", "sic"], default="nic")
    e.add_argument("--small", action="store_true", help="small-sample (repeated subsampling) study")
    e.add_argument("--n", type=int)
    e.add_argument("--n-super", type=int)
    e.add_argument("--iterations", type=int)
    e.add_argument("--methods", help="comma-separated subset of aj,pv,blr,mlr")
    e.add_argument("--prediction", choices=list(experiment.PREDICTION_SHIFT), default="perfect")
    e.add_argument("--weights", choices=list(experiment.WEIGHT_VARIANTS), default="estimated")
    e.add_argument("--groups", type=int, default=20)
    e.add_argument("--cap", type=float, default=math.inf)
    e.add_argument("--bootstrap", type=int, default=0)
    e.add_argument("--seed", type=int, default=1)
    e.add_argument("--threads", type=int, help="maximum worker processes")
    e.add_argument("--paper-scale", action="store_true", help="use the full-size study settings")
    e.add_argument("--svg", action="store_true")
    e.add_argument("--out", default=".")
    e.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"mscalib: error: {exc}", file=sys.stderr)
        return exc.code
    except DATA_ERRORS as exc:
        print(f"mscalib: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MscalibError as exc:
        print(f"mscalib: error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"mscalib: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
