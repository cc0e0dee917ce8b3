"""Command-line interface: simulate, sample, estimate, report.

Exit codes: 0 on success (statistical non-convergence is reported in-band),
1 on internal errors, 2 on usage or input errors.  Every command writes a
manifest JSON next to its outputs with the resolved configuration, seed,
and tool version, so a run can be reproduced exactly.
"""

from __future__ import annotations

import argparse
import glob as globmod
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .cohort import km_censoring_survival, load_cohort_csv
from .estimators import Link, NonConvergenceError
from .perturbation import run_perturbation
from .pipeline import EstimateConfig, estimate_parameters
from .sampling import (NccDesign, assignments_path_for, load_sample_csv,
                       sample, write_sample_csv)
from .simulation import (SimConfig, REPORT_COLUMNS, simulate_cell, write_report_csv)
from .weights import new_weight, samuelsen_weight

__all__ = ["main"]


class InputError(ValueError):
    """User/input problem: maps to exit code 2."""


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(float(v))  # plain-float repr even for numpy scalars
    return str(v)


def _write_manifest(path: Path, command: str, config: dict, inputs: list, outputs: list,
                    seed, started: float) -> None:
    manifest = {
        "command": command,
        "config": config,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "master_seed": seed,
        "version": __version__,
        "duration_seconds": round(time.time() - started, 3),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_match(text):
    if text is None:
        return None
    try:
        tol = np.array([float(tok) for tok in text.split(",") if tok.strip() != ""])
    except ValueError:
        raise InputError(f"--match must be a comma-separated tolerance vector, got {text!r}")
    if tol.size == 0 or np.any(tol < 0):
        raise InputError("--match tolerances must be nonnegative")
    return tol


# ---------------------------------------------------------------------------
# simulate

_CONFIG_KEYS = {
    "n_cohort": int,
    "pi1": "float_list",
    "m": int,
    "matching": "bool_list",
    "t0": float,
    "model": "str_list",
    "n_reps": int,
    "n_perturb": int,
    "fpr_target": float,
    "master_seed": int,
    "oracle_draws": int,
    "oracle_seed": int,
    "ci_level": float,
}

_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _parse_config_file(path: Path) -> dict:
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    values: dict = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}: line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        if key not in _CONFIG_KEYS:
            raise InputError(f"{path}: line {lineno}: unknown config key '{key}'")
        kind = _CONFIG_KEYS[key]
        try:
            if kind is int:
                values[key] = int(val)
            elif kind is float:
                values[key] = float(val)
            elif kind == "float_list":
                values[key] = [float(tok) for tok in val.split(",")]
            elif kind == "str_list":
                values[key] = [tok.strip().lower() for tok in val.split(",")]
            elif kind == "bool_list":
                toks = [tok.strip().lower() for tok in val.split(",")]
                if any(tok not in _BOOLS for tok in toks):
                    raise ValueError(val)
                values[key] = [_BOOLS[tok] for tok in toks]
        except ValueError:
            raise InputError(f"{path}: line {lineno}: bad value for '{key}': {val!r}") from None
    for required in ("n_cohort", "pi1", "m", "t0", "model", "n_reps", "n_perturb"):
        if required not in values:
            raise InputError(f"{path}: missing required config key '{required}'")
    values.setdefault("matching", [False])
    values.setdefault("fpr_target", 0.05)
    values.setdefault("master_seed", 0)
    return values


def _cell_name(model: str, pi1: float, matching: bool) -> str:
    tag = "match" if matching else "nomatch"
    return f"{model}_pi1-{pi1:g}_{tag}.csv"


def cmd_simulate(args) -> int:
    started = time.time()
    values = _parse_config_file(Path(args.config))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for model in values["model"]:
        for pi1 in values["pi1"]:
            for matching in values["matching"]:
                kwargs = dict(
                    n_cohort=values["n_cohort"], pi1=pi1, m=values["m"],
                    matching=matching, t0=values["t0"], model=model,
                    n_reps=values["n_reps"], n_perturb=values["n_perturb"],
                    fpr_target=values["fpr_target"], master_seed=values["master_seed"],
                )
                for opt in ("oracle_draws", "oracle_seed", "ci_level"):
                    if opt in values:
                        kwargs[opt] = values[opt]
                try:
                    config = SimConfig(**kwargs)
                except ValueError as exc:
                    raise InputError(str(exc)) from None
                _, _, report = simulate_cell(config, threads=args.threads)
                out = outdir / _cell_name(model, pi1, matching)
                write_report_csv(report, out)
                outputs.append(out)
    _write_manifest(outdir / "manifest.json", "simulate", values, [args.config],
                    outputs, values["master_seed"], started)
    return 0


# ---------------------------------------------------------------------------
# sample

def cmd_sample(args) -> int:
    started = time.time()
    cohort = load_cohort_csv(args.cohort)
    tol = _parse_match(args.match)
    try:
        design = NccDesign(pi1=args.pi1, m=args.m, match_tol=tol)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    rng = np.random.default_rng(np.random.SeedSequence((args.seed,)))
    ncc = sample(cohort, design, rng)
    out = Path(args.out)
    write_sample_csv(ncc, out)
    _write_manifest(out.with_suffix(out.suffix + ".manifest.json"), "sample",
                    {"pi1": args.pi1, "m": args.m, "match": args.match, "seed": args.seed},
                    [args.cohort], [out, assignments_path_for(out)], args.seed, started)
    return 0


# ---------------------------------------------------------------------------
# estimate

def _result_record(config: EstimateConfig, fit, summary, pert, names, scheme: str,
                   b: int, converged: bool, message: str | None) -> dict:
    record = {
        "model": config.model,
        "t0": config.t0,
        "weight": scheme,
        "converged": converged,
        "iterations": fit.iterations if fit is not None else None,
        "alpha": None if fit is None or not converged else fit.alpha,
        "beta": None if fit is None or not converged else [float(v) for v in fit.beta],
        "parameter_names": names,
        "accuracy": None if summary is None else {
            "t0": summary.t0, "cutoff": summary.cutoff, "tpr": summary.tpr,
            "fpr": summary.fpr, "ppv": summary.ppv, "npv": summary.npv,
            "auc": summary.auc,
        },
        "message": message,
        "B": b,
    }
    if pert is not None:
        record["perturbation"] = {
            "se": [float(v) for v in pert.se],
            "ci_lower": [float(v) for v in pert.ci_lower],
            "ci_upper": [float(v) for v in pert.ci_upper],
            "b_used": pert.b_used,
            "b_total": pert.b_total,
        }
    return record


def cmd_estimate(args) -> int:
    started = time.time()
    cohort = load_cohort_csv(args.cohort)
    tol = _parse_match(args.match)
    ncc = load_sample_csv(args.sample, cohort, match_tol=tol)
    if args.pi1 is not None and abs(args.pi1 - ncc.pi1_realized) > 1e-9:
        raise InputError(f"--pi1 {args.pi1} disagrees with the realized case "
                         f"fraction {ncc.pi1_realized!r} in {args.sample}")
    if args.weight == "new":
        weights = new_weight(ncc, cohort)
    else:
        weights = samuelsen_weight(ncc, cohort)
    g_hat = km_censoring_survival(cohort)
    config = EstimateConfig(model=args.model, t0=args.t0,
                            link=Link.LOGIT, fpr_target=args.fpr_target)
    fit = summary = pert = None
    names: list = []
    converged = True
    message = None
    try:
        result = estimate_parameters(cohort, weights.values, g_hat, config)
        fit, summary, names = result.fit, result.summary, result.names
        if args.B > 0 and args.weight == "new":
            pert = run_perturbation(cohort, ncc, config, args.B,
                                    entropy=(args.seed,), point=result.params,
                                    level=0.95, cutoff=None)
    except NonConvergenceError as exc:
        converged = False
        fit = exc.fit
        message = str(exc)
    out = Path(args.out)
    record = _result_record(config, fit, summary, pert, names, args.weight,
                            args.B, converged, message)
    out.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    wpath = out.with_suffix(".weights.csv")
    with open(wpath, "w", encoding="utf-8") as fh:
        fh.write("id,w\n")
        for j, w in enumerate(weights.values):
            fh.write(f"{j},{float(w)!r}\n")
    _write_manifest(out.with_suffix(".manifest.json"), "estimate",
                    {"model": args.model, "t0": args.t0, "weight": args.weight,
                     "B": args.B, "fpr_target": args.fpr_target, "seed": args.seed,
                     "match": args.match},
                    [args.cohort, args.sample], [out, wpath], args.seed, started)
    return 0


# ---------------------------------------------------------------------------
# report

def _load_truths_csv(path) -> dict:
    truths = {}
    with open(path, newline="", encoding="utf-8") as fh:
        import csv as _csv
        reader = _csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header][:2] != ["parameter", "true"]:
            raise InputError(f"{path}: truths header must be parameter,true")
        for row in reader:
            if not row or all(not c.strip() for c in row):
                continue
            truths[row[0].strip()] = float(row[1])
    return truths


def cmd_report(args) -> int:
    started = time.time()
    paths = sorted(p for pattern in args.results for p in globmod.glob(pattern))
    if not paths:
        raise InputError("no result files matched the given glob(s)")
    records = []
    for p in paths:
        try:
            records.append(json.loads(Path(p).read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise InputError(f"{p}: not valid JSON ({exc})") from None
    keys = {(r.get("model"), r.get("t0")) for r in records}
    if len(keys) != 1:
        raise InputError(f"mixed incompatible configs across result files: {sorted(keys)}")
    names = None
    for r in records:
        if r.get("parameter_names"):
            names = r["parameter_names"]
            break
    if names is None:
        raise InputError("no result record carries parameter names (all non-converged?)")
    truths = _load_truths_csv(args.truths) if args.truths else {}

    def param_vector(rec):
        if not rec.get("converged") or rec.get("alpha") is None:
            return None
        acc = rec.get("accuracy") or {}
        vec = [rec["alpha"], *rec["beta"],
               acc.get("auc"), acc.get("tpr"), acc.get("ppv"), acc.get("npv")]
        return [np.nan if v is None else float(v) for v in vec]

    grouped: dict[str, list] = {"new": [], "samuelsen": []}
    pert_se: dict[str, list] = {"new": [], "samuelsen": []}
    nonconv = {"new": 0, "samuelsen": 0}
    for rec in records:
        scheme = rec.get("weight")
        if scheme not in grouped:
            raise InputError(f"unknown weight scheme in a result record: {scheme!r}")
        vec = param_vector(rec)
        if vec is None:
            nonconv[scheme] += 1
            continue
        grouped[scheme].append(vec)
        if "perturbation" in rec:
            pert_se[scheme].append(rec["perturbation"]["se"])

    rows = []
    for k, name in enumerate(names):
        true = truths.get(name)
        row = {"parameter": name, "true": true}
        for scheme in ("new", "samuelsen"):
            vals = np.array([v[k] for v in grouped[scheme] if np.isfinite(v[k])])
            mean = float(vals.mean()) if vals.size else None
            row[f"bias_{scheme}"] = (mean - true) if (mean is not None and true is not None) else None
            row[f"esd_{scheme}"] = float(vals.std(ddof=1)) if vals.size > 1 else None
        row["bias_full"] = None
        ses = np.array([s[k] for s in pert_se["new"]]) if pert_se["new"] else np.array([])
        row["pase"] = float(ses.mean()) if ses.size else None
        row["coverage"] = None
        rows.append(row)

    out = Path(args.out)
    import csv as _csv
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row["parameter"]), _fmt(row["true"]), _fmt(row["bias_full"]),
                             _fmt(row["bias_samuelsen"]), _fmt(row["esd_samuelsen"]),
                             _fmt(row["bias_new"]), _fmt(row["esd_new"]), _fmt(row["pase"]),
                             _fmt(row["coverage"]), _fmt(nonconv["samuelsen"]), _fmt(nonconv["new"])])
    _write_manifest(out.with_suffix(".manifest.json"), "report",
                    {"results": args.results, "truths": args.truths}, paths, [out], None, started)
    return 0


# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nccipw",
                                     description="IPW estimation and perturbation inference "
                                                 "for nested case-control studies")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the simulation study from a config file")
    p_sim.add_argument("--config", required=True)
    p_sim.add_argument("--out", required=True, help="output directory for per-cell CSV reports")
    p_sim.add_argument("--threads", type=int, default=None)
    p_sim.set_defaults(func=cmd_simulate)

    p_samp = sub.add_parser("sample", help="draw one NCC sample from a cohort CSV")
    p_samp.add_argument("--cohort", required=True)
    p_samp.add_argument("--pi1", type=float, required=True)
    p_samp.add_argument("--m", type=int, required=True)
    p_samp.add_argument("--match", default=None,
                        help="comma-separated matching tolerances, e.g. 0,1")
    p_samp.add_argument("--seed", type=int, default=0)
    p_samp.add_argument("--out", required=True, help="output sample CSV path")
    p_samp.set_defaults(func=cmd_sample)

    p_est = sub.add_parser("estimate", help="fit a risk model on an NCC sample")
    p_est.add_argument("--cohort", required=True)
    p_est.add_argument("--sample", required=True,
                       help="sample CSV from the sample command (assignments file "
                            "is found next to it)")
    p_est.add_argument("--model", choices=["cox", "glm"], required=True)
    p_est.add_argument("--t0", type=float, required=True)
    p_est.add_argument("--weight", choices=["new", "samuelsen"], default="new")
    p_est.add_argument("--pi1", type=float, default=None,
                       help="optional consistency check against the realized case fraction")
    p_est.add_argument("--match", default=None,
                       help="matching tolerances used when the sample was drawn")
    p_est.add_argument("--B", type=int, default=0, help="perturbation replicates (0 = none)")
    p_est.add_argument("--fpr-target", type=float, default=0.05)
    p_est.add_argument("--seed", type=int, default=0)
    p_est.add_argument("--threads", type=int, default=None)
    p_est.add_argument("--out", required=True, help="output JSON path")
    p_est.set_defaults(func=cmd_estimate)

    p_rep = sub.add_parser("report", help="aggregate estimate JSON records into a CSV table")
    p_rep.add_argument("results", nargs="+", help="result file paths or globs")
    p_rep.add_argument("--truths", default=None,
                       help="optional CSV of parameter,true rows enabling bias/coverage columns")
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - classify anything else as internal
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
