"""Command-line front end: dataset ingestion, estimation, diagnostics,
structure selection, and simulation sweeps.

Exit codes: 0 success, 1 operational error, 2 statistical infeasibility
without --allow-infeasible, 64 usage error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass, asdict
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .core import ClusterSample, Dataset
from .diagnostics import imbalance_report
from .errors import ClusterbalError, InfeasibleFit, ParseError
from .estimators import (
    balancing_fit,
    exposure_collapsed_ipw,
    ipw_fit,
    projection_fit,
    weighted_projection_fit,
)
from .inference import iid_cluster_variance, sandwich_variance, select_structure
from .simulate import (
    DEFAULT_ESTIMATORS,
    DGPConfig,
    calibrate_snr,
    preset_config,
    resolve_gamma,
    sweep,
)
from .specio import propensity_from_json, weight_from_json
from .structures import build_structure, exposure_from_spec

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INFEASIBLE = 2
EXIT_USAGE = 64


# ---------- dataset io ----------


def load_dataset(path, fmt=None):
    """Dataset from CSV (cluster_id, unit_id, treatment, outcome, x1..xp) or JSON."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "json":
        return _load_json_dataset(path)
    if fmt != "csv":
        raise ParseError(f"unknown dataset format {fmt!r}")
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = [r for r in reader if r]
    if not rows:
        raise ParseError("no rows")
    header = [h.strip() for h in rows[0]]
    required = ["cluster_id", "unit_id", "treatment", "outcome"]
    for col in required:
        if col not in header:
            raise ParseError(f"missing column {col!r}", column=col)
    xcols = [h for h in header if h.startswith("x")]
    try:
        xcols.sort(key=lambda h: int(h[1:]))
    except ValueError as exc:
        raise ParseError(f"malformed covariate column name: {exc}") from exc
    if not xcols:
        raise ParseError("no covariate columns x1..xp found")
    idx = {h: header.index(h) for h in header}
    if len(rows) == 1:
        raise ParseError("no rows")

    groups = {}
    order = []
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=r)

        def cell(col, r=r, row=row):
            return row[idx[col]].strip()

        cid = cell("cluster_id")
        try:
            unit = float(cell("unit_id"))
        except ValueError:
            raise ParseError("unit_id is not numeric", row=r, column="unit_id") from None
        try:
            treatment = float(cell("treatment"))
        except ValueError:
            raise ParseError("treatment is not numeric", row=r, column="treatment") from None
        if treatment not in (0.0, 1.0):
            raise ParseError(f"treatment must be 0/1, got {cell('treatment')}", row=r, column="treatment")
        try:
            outcome = float(cell("outcome"))
        except ValueError:
            raise ParseError("outcome is not numeric", row=r, column="outcome") from None
        xs = []
        for col in xcols:
            try:
                xs.append(float(cell(col)))
            except ValueError:
                raise ParseError("covariate is not numeric", row=r, column=col) from None
        if cid not in groups:
            groups[cid] = []
            order.append(cid)
        groups[cid].append((unit, int(treatment), outcome, xs))

    clusters = []
    for cid in order:
        rows_c = sorted(groups[cid], key=lambda t: t[0])
        clusters.append(
            ClusterSample(
                covariates=np.array([t[3] for t in rows_c], dtype=np.float64),
                treatments=np.array([t[1] for t in rows_c], dtype=np.int8),
                outcomes=np.array([t[2] for t in rows_c], dtype=np.float64),
                cluster_id=cid,
            )
        )
    return Dataset(clusters=tuple(clusters))


def _load_json_dataset(path):
    with open(path) as fh:
        doc = json.load(fh)
    if "clusters" not in doc or not doc["clusters"]:
        raise ParseError("no rows")
    clusters = []
    for entry in doc["clusters"]:
        clusters.append(
            ClusterSample(
                covariates=np.asarray(entry["covariates"], dtype=np.float64),
                treatments=np.asarray(entry["treatments"]),
                outcomes=np.asarray(entry["outcomes"], dtype=np.float64),
                cluster_id=entry.get("cluster_id"),
            )
        )
    return Dataset(clusters=tuple(clusters))


def write_dataset(dataset, path, fmt=None):
    """Inverse of load_dataset; round-trips exactly."""
    fmt = fmt or ("json" if str(path).endswith(".json") else "csv")
    if fmt == "json":
        payload = {
            "clusters": [
                {
                    "cluster_id": c.cluster_id,
                    "covariates": c.covariates.tolist(),
                    "treatments": c.treatments.tolist(),
                    "outcomes": c.outcomes.tolist(),
                }
                for c in dataset.clusters
            ]
        }
        _atomic_write(path, json.dumps(payload, indent=1).encode())
        return
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    p = dataset.p
    writer.writerow(["cluster_id", "unit_id", "treatment", "outcome"] + [f"x{j+1}" for j in range(p)])
    for c in dataset.clusters:
        for i in range(c.size):
            writer.writerow(
                [c.cluster_id, i, int(c.treatments[i]), repr(float(c.outcomes[i]))]
                + [repr(float(v)) for v in c.covariates[i]]
            )
    _atomic_write(path, buf.getvalue().encode())


# ---------- artifacts and manifests ----------


@dataclass
class RunManifest:
    command: str
    inputs: dict
    seed: int
    version: str
    timestamp: str
    output_digest: str = ""


def _new_manifest(args, inputs, seed):
    return RunManifest(
        command="clusterbal " + " ".join(args),
        inputs=inputs,
        seed=int(seed),
        version=__version__,
        timestamp=datetime.now(timezone.utc).isoformat(),
    )


def _atomic_write(path, data):
    d = os.path.dirname(os.path.abspath(path)) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def _digest(data):
    return hashlib.sha256(data).hexdigest()


def write_json_artifact(path, result, manifest):
    payload = json.dumps(result, indent=1, sort_keys=True, default=float)
    manifest.output_digest = _digest(payload.encode())
    doc = json.dumps({"manifest": asdict(manifest), "result": result}, indent=1, sort_keys=True, default=float)
    _atomic_write(path, doc.encode())


def write_csv_artifact(path, rows, fieldnames, manifest):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fieldnames, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})
    data = buf.getvalue().encode()
    _atomic_write(path, data)
    manifest.output_digest = _digest(data)
    _atomic_write(path + ".manifest.json", json.dumps(asdict(manifest), indent=1).encode())


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (np.floating,)):
        return repr(float(v))
    return v


def _load_json_file(path):
    with open(path) as fh:
        return json.load(fh)


# ---------- subcommands ----------


def _resolve_seed(args):
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(np.random.SeedSequence().entropy % (2**63))


def _cmd_estimate(args, argv):
    dataset = load_dataset(args.dataset, args.format)
    weight = weight_from_json(_load_json_file(args.policy))
    propensity = (
        propensity_from_json("unknown")
        if args.propensity == "unknown"
        else propensity_from_json(_load_json_file(args.propensity))
    )
    structure = None
    if args.structure:
        structure = build_structure(_load_json_file(args.structure), dataset)
    seed = _resolve_seed(args)
    inputs = {
        "dataset": args.dataset,
        "policy": args.policy,
        "propensity": args.propensity,
        "structure": args.structure,
    }
    exit_code = EXIT_OK
    results = {}
    rows = []
    for name in args.estimator:
        if name == "ipw":
            fit = ipw_fit(dataset, weight, propensity)
            var = iid_cluster_variance(dataset, fit, args.level)
        elif name == "balancing":
            fit = balancing_fit(dataset, structure, weight)
            var = None
            if fit.feasible or args.allow_infeasible:
                var = sandwich_variance(
                    dataset, structure, weight, fit, "bal",
                    level=args.level, allow_infeasible=args.allow_infeasible,
                )
            if not fit.feasible:
                report = imbalance_report(dataset, structure, weight, fit)
                results["imbalance"] = report.to_dict()
                rows_i = report.rows()
                manifest = _new_manifest(argv, inputs, seed)
                write_csv_artifact(
                    os.path.join(args.out_dir, "imbalance.csv"),
                    rows_i,
                    list(rows_i[0].keys()),
                    manifest,
                )
                if not args.allow_infeasible:
                    exit_code = EXIT_INFEASIBLE
        elif name == "projection":
            fit = projection_fit(dataset, structure, weight, propensity)
            var = sandwich_variance(
                dataset, structure, weight, fit, "proj",
                propensity=propensity, level=args.level,
            )
        elif name == "wproj":
            fit = weighted_projection_fit(dataset, structure, weight, propensity)
            var = sandwich_variance(
                dataset, structure, weight, fit, "wproj",
                propensity=propensity, level=args.level,
            )
        elif name == "exposure-ipw":
            mapping = exposure_from_spec(_load_json_file(args.exposure_mapping))
            fit = exposure_collapsed_ipw(dataset, mapping, weight, propensity)
            var = iid_cluster_variance(dataset, fit, args.level)
        else:
            raise ClusterbalError(f"unknown estimator {name!r}")
        entry = fit.to_dict()
        if var is not None:
            entry["variance"] = var.to_dict()
        results[name] = entry
        rows.append(
            {
                "estimator": name,
                "point": fit.point,
                "feasible": fit.feasible,
                "sigma2_hat": var.sigma2_hat if var else float("nan"),
                "ci_low": var.ci_low if var else float("nan"),
                "ci_high": var.ci_high if var else float("nan"),
                "level": args.level,
            }
        )
    manifest = _new_manifest(argv, inputs, seed)
    write_json_artifact(os.path.join(args.out_dir, "estimates.json"), results, manifest)
    write_csv_artifact(
        os.path.join(args.out_dir, "estimates.csv"),
        rows,
        ["estimator", "point", "feasible", "sigma2_hat", "ci_low", "ci_high", "level"],
        _new_manifest(argv, inputs, seed),
    )
    return exit_code


def _cmd_balance_report(args, argv):
    dataset = load_dataset(args.dataset, args.format)
    weight = weight_from_json(_load_json_file(args.policy))
    structure = build_structure(_load_json_file(args.structure), dataset)
    fit = balancing_fit(dataset, structure, weight)
    report = imbalance_report(dataset, structure, weight, fit, threshold=args.threshold)
    seed = _resolve_seed(args)
    inputs = {"dataset": args.dataset, "policy": args.policy, "structure": args.structure}
    doc = report.to_dict()
    doc["feasible"] = fit.feasible
    doc["point"] = fit.point
    write_json_artifact(
        os.path.join(args.out_dir, "balance_report.json"), doc, _new_manifest(argv, inputs, seed)
    )
    rows = report.rows()
    write_csv_artifact(
        os.path.join(args.out_dir, "balance_report.csv"),
        rows,
        list(rows[0].keys()),
        _new_manifest(argv, inputs, seed),
    )
    return EXIT_OK


def _cmd_select(args, argv):
    dataset = load_dataset(args.dataset, args.format)
    weight = weight_from_json(_load_json_file(args.policy))
    specs = _load_json_file(args.candidates)
    candidates = [build_structure(s, dataset) for s in specs]
    seed = _resolve_seed(args)
    inputs = {"dataset": args.dataset, "policy": args.policy, "candidates": args.candidates}
    report = select_structure(dataset, weight, candidates, alpha=args.alpha)
    doc = report.to_dict()
    write_json_artifact(
        os.path.join(args.out_dir, "selection.json"), doc, _new_manifest(argv, inputs, seed)
    )
    rows = [
        {
            "candidate": report.labels[l],
            "reference": report.labels[-1],
            "statistic": report.statistics[l],
            "p_value": report.p_values[l],
            "chosen": l == report.chosen,
        }
        for l in range(len(report.statistics))
    ]
    if not rows:
        rows = [
            {
                "candidate": report.labels[-1],
                "reference": report.labels[-1],
                "statistic": float("nan"),
                "p_value": float("nan"),
                "chosen": True,
            }
        ]
    write_csv_artifact(
        os.path.join(args.out_dir, "selection.csv"),
        rows,
        ["candidate", "reference", "statistic", "p_value", "chosen"],
        _new_manifest(argv, inputs, seed),
    )
    return EXIT_OK


def _simulate_config(args, seed):
    if args.preset:
        cfg, axis, values = preset_config(args.preset, seed=seed)
    else:
        doc = _load_json_file(args.config)
        axis = doc.pop("axis", "n")
        values = tuple(doc.pop("values", (doc.get("n", 300),)))
        doc.setdefault("n", 300)
        doc["seed"] = seed
        cfg = DGPConfig(**doc)
    if args.n is not None:
        axis, values = "n", tuple(args.n)
    return cfg, axis, values


def _cmd_simulate(args, argv):
    seed = _resolve_seed(args)
    cfg, axis, values = _simulate_config(args, seed)
    estimators = tuple(args.estimators.split(",")) if args.estimators else DEFAULT_ESTIMATORS
    rows = sweep(
        cfg,
        axis,
        values,
        reps=args.reps,
        estimators=estimators,
        level=args.level,
        parallel=args.parallel,
        workers=args.workers,
        truth_draws=args.truth_draws,
    )
    fieldnames = [
        axis,
        "estimator",
        "bias",
        "sd",
        "coverage",
        "ci_length",
        "feasibility_rate",
        "n_used",
        "errors",
        "reps",
        "true_mu",
    ]
    inputs = {"preset": args.preset, "config": args.config}
    write_csv_artifact(
        os.path.join(args.out_dir, "simulate.csv"), rows, fieldnames, _new_manifest(argv, inputs, seed)
    )
    write_json_artifact(
        os.path.join(args.out_dir, "simulate.json"), rows, _new_manifest(argv, inputs, seed)
    )
    return EXIT_OK


def _cmd_calibrate(args, argv):
    seed = _resolve_seed(args)
    if args.preset:
        cfg, _, _ = preset_config(args.preset, seed=seed)
    else:
        doc = _load_json_file(args.config)
        doc.pop("axis", None)
        doc.pop("values", None)
        doc.setdefault("n", 300)
        doc["seed"] = seed
        cfg = DGPConfig(**doc)
    if args.snr_target is not None:
        cfg = DGPConfig(**{**_cfg_dict(cfg), "snr_target": args.snr_target})
    report = calibrate_snr(cfg)
    doc = {
        "gamma": report.gamma,
        "snr_at_unit_gamma": report.snr_at_unit_gamma,
        "se_gamma": report.se_gamma,
        "draws": report.draws,
        "snr_target": cfg.snr_target,
    }
    write_json_artifact(
        os.path.join(args.out_dir, "calibration.json"),
        doc,
        _new_manifest(argv, {"preset": args.preset, "config": args.config}, seed),
    )
    print(f"gamma = {report.gamma!r} (snr at gamma=1: {report.snr_at_unit_gamma!r})")
    return EXIT_OK


def _cfg_dict(cfg):
    return {
        "n": cfg.n,
        "interference": cfg.interference,
        "kappa": cfg.kappa,
        "snr_target": cfg.snr_target,
        "sigma2": cfg.sigma2,
        "rho": cfg.rho,
        "cluster_sizes": cfg.cluster_sizes,
        "p": cfg.p,
        "seed": cfg.seed,
        "gamma": cfg.gamma,
    }


# ---------- parser ----------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _build_parser():
    parser = _Parser(prog="clusterbal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", default=".")
        p.add_argument("--format", choices=["csv", "json"], default=None, help="dataset file format")

    p_est = sub.add_parser("estimate", help="fit weighting estimators with CIs")
    common(p_est)
    p_est.add_argument("--dataset", required=True)
    p_est.add_argument("--policy", required=True, help="counterfactual weight JSON spec")
    p_est.add_argument("--propensity", default="unknown", help="JSON spec path or 'unknown'")
    p_est.add_argument("--structure", default=None, help="structure JSON spec")
    p_est.add_argument("--exposure-mapping", default=None, help="exposure mapping JSON spec")
    p_est.add_argument(
        "--estimator",
        action="append",
        required=True,
        choices=["ipw", "balancing", "projection", "wproj", "exposure-ipw"],
    )
    p_est.add_argument("--level", type=float, default=0.95)
    p_est.add_argument("--allow-infeasible", action="store_true")

    p_bal = sub.add_parser("balance-report", help="imbalance diagnostics for a balancing fit")
    common(p_bal)
    p_bal.add_argument("--dataset", required=True)
    p_bal.add_argument("--policy", required=True)
    p_bal.add_argument("--structure", required=True)
    p_bal.add_argument("--threshold", type=float, default=0.10)

    p_sel = sub.add_parser("select", help="data-adaptive structure selection")
    common(p_sel)
    p_sel.add_argument("--dataset", required=True)
    p_sel.add_argument("--policy", required=True)
    p_sel.add_argument("--candidates", required=True, help="JSON list of structure specs")
    p_sel.add_argument("--alpha", type=float, default=0.05)

    p_sim = sub.add_parser("simulate", help="Monte-Carlo sweep")
    common(p_sim)
    p_sim.add_argument("--preset", choices=["fig1-left", "fig1-mid", "fig1-right", "stratified", "additive"])
    p_sim.add_argument("--config", help="DGP config JSON")
    p_sim.add_argument("--reps", type=int, default=500)
    p_sim.add_argument("--estimators", default=None, help="comma-separated estimator names")
    p_sim.add_argument("--level", type=float, default=0.95)
    p_sim.add_argument("--parallel", action="store_true")
    p_sim.add_argument("--workers", type=int, default=None)
    p_sim.add_argument("--n", type=int, nargs="+", default=None, help="override the n axis")
    p_sim.add_argument("--truth-draws", type=int, default=400_000, help="cluster draws for the truth Monte Carlo")

    p_cal = sub.add_parser("calibrate", help="signal scale for an SNR target")
    common(p_cal)
    p_cal.add_argument("--preset", choices=list(DGPConfig.__annotations__) and ["fig1-left", "fig1-mid", "fig1-right", "stratified", "additive"])
    p_cal.add_argument("--config", help="DGP config JSON")
    p_cal.add_argument("--snr-target", type=float, default=None)
    return parser


_COMMANDS = {
    "estimate": _cmd_estimate,
    "balance-report": _cmd_balance_report,
    "select": _cmd_select,
    "simulate": _cmd_simulate,
    "calibrate": _cmd_calibrate,
}


def run(argv):
    """Parse and execute; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if args.command in ("simulate", "calibrate"):
        if not args.preset and not args.config:
            sys.stderr.write("error: need --preset or --config\n")
            return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args, argv)
    except InfeasibleFit as exc:
        sys.stderr.write(f"infeasible: {exc}\n")
        return EXIT_INFEASIBLE
    except ClusterbalError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_ERROR


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
