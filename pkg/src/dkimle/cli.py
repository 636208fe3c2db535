"""Command line driver: simulate, fit, compare, metrics.

File formats
------------
protocol      text rows ``b gx gy gz`` (s/mm^2) or the JSON form
              ``{"bvals": [...], "bvecs": [[...], ...]}``.
voxel table   header line ``m=<count>``, then one line per voxel with m
              comma-separated magnitudes; ``#`` comments allowed.
truth sidecar JSON object keyed by voxel index.
fit output    JSON lines, one voxel per line.
compare       JSON report plus an aligned text table on stdout.

Identical (command, seed) pairs produce byte-identical voxel tables and
numerically identical fit parameters regardless of the worker count.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .estimators import FitOptions, FitResult, ConstraintFlags, fit_voxel
from .metrics import evaluate, scalar_metrics
from .protocol import AcquisitionProtocol, dump_protocol, load_protocol
from .simulate import DEFAULT_SEED, GroundTruthVoxel, SCENARIOS, scenario

_WORKERS_ENV = "DKIMLE_WORKERS"


class CliError(Exception):
    pass


# ---------------------------------------------------------------------------
# voxel table format

def dump_voxel_table(rows: np.ndarray) -> str:
    rows = np.atleast_2d(rows)
    lines = [f"m={rows.shape[1]}"]
    for r in rows:
        lines.append(",".join(format(x, ".17g") for x in r))
    return "\n".join(lines) + "\n"


def load_voxel_table(text: str) -> np.ndarray:
    m = None
    rows = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if m is None:
            if not line.startswith("m="):
                raise CliError(f"line {lineno}: voxel table must start with 'm=<count>'")
            m = int(line[2:])
            continue
        vals = [float(p) for p in line.split(",")]
        if len(vals) != m:
            raise CliError(f"line {lineno}: expected {m} magnitudes, got {len(vals)}")
        rows.append(vals)
    if m is None or not rows:
        raise CliError("voxel table is empty")
    return np.asarray(rows, dtype=float)


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc}") from None


def _read(path: str) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands

def cmd_simulate(args) -> int:
    if args.snr is not None and args.snr <= 0:
        raise CliError(f"--snr must be positive, got {args.snr}")
    snr = args.snr if args.snr is not None else 15.0
    protocol, rows, truths = scenario(args.scenario, snr=snr, seed=args.seed,
                                      n_voxels=args.voxels)
    prefix = args.out
    _write(prefix + ".protocol.txt", dump_protocol(protocol))
    _write(prefix + ".voxels.csv", dump_voxel_table(rows))
    sidecar = {str(i): gt.to_dict() for i, gt in enumerate(truths)}
    _write(prefix + ".truth.json", json.dumps(sidecar, indent=1))
    print(f"wrote {rows.shape[0]} voxels x {rows.shape[1]} acquisitions to {prefix}.*")
    return 0


def _fit_one(payload):
    index, y, bvals, bvecs, estimator, options = payload
    protocol = AcquisitionProtocol(bvals, bvecs)
    result = fit_voxel(y, protocol, estimator, options)
    return index, result


def _result_record(index: int, r: FitResult) -> dict:
    sm = scalar_metrics(r.theta_d, r.theta_w, r.s0, r.sigma2)
    record = {
        "voxel": index,
        "estimator": r.estimator,
    }
    if r.params is not None:
        record["L"] = [float(x) for x in r.params.L]
        record["thetaQ"] = [float(x) for x in r.params.theta_q]
    record["S0"] = float(r.s0)
    record["sigma2"] = float(r.sigma2)
    record["theta_d"] = [float(x) for x in r.theta_d]
    record["theta_w"] = [float(x) for x in r.theta_w]
    record["b_scale"] = r.b_scale
    record["metrics"] = sm.to_dict()
    record["diagnostics"] = {
        "iterations": r.em_iterations,
        "converged": bool(r.converged),
        "loglik": float(r.loglik_trace[-1]) if r.loglik_trace.size else None,
        "violations": {
            "d_not_pd": bool(r.violations.d_not_pd),
            "kurtosis_negative": bool(r.violations.kurtosis_negative),
            "decay_bound": bool(r.violations.decay_bound),
        },
        "wall_time": r.wall_time,
    }
    return record


def cmd_fit(args) -> int:
    protocol = load_protocol(_read(args.protocol))
    rows = load_voxel_table(_read(args.data))
    if rows.shape[1] != protocol.m:
        raise CliError(
            f"data has {rows.shape[1]} acquisitions per voxel "
            f"but protocol has {protocol.m}"
        )
    options = FitOptions()
    if args.max_sweeps:
        options.max_sweeps = args.max_sweeps
    if args.grad_tol:
        options.solver.grad_tol = args.grad_tol

    workers = args.workers or int(os.environ.get(_WORKERS_ENV, "1"))
    payloads = [
        (i, rows[i], protocol.bvals, protocol.bvecs, args.estimator, options)
        for i in range(rows.shape[0])
    ]
    results: list = [None] * rows.shape[0]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for index, result in pool.map(_fit_one, payloads):
                results[index] = result
    else:
        for payload in payloads:
            index, result = _fit_one(payload)
            results[index] = result

    lines = [json.dumps(_result_record(i, r)) for i, r in enumerate(results)]
    _write(args.out, "\n".join(lines) + "\n")
    n_bad = sum(not r.converged for r in results)
    print(f"fitted {len(results)} voxels with {args.estimator}; "
          f"{n_bad} flagged non-converged; wrote {args.out}")
    return 0


def _fits_from_jsonl(text: str):
    fits = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CliError(f"fit line {lineno}: {exc}") from None
        viol = rec.get("diagnostics", {}).get("violations", {})
        fits.append(FitResult(
            estimator=rec.get("estimator", "?"),
            theta_d=np.asarray(rec["theta_d"], dtype=float),
            theta_w=np.asarray(rec["theta_w"], dtype=float),
            s0=float(rec["S0"]),
            sigma2=float(rec["sigma2"]),
            loglik_trace=np.zeros(0),
            em_iterations=int(rec.get("diagnostics", {}).get("iterations", 0)),
            converged=bool(rec.get("diagnostics", {}).get("converged", True)),
            violations=ConstraintFlags(
                d_not_pd=bool(viol.get("d_not_pd", False)),
                kurtosis_negative=bool(viol.get("kurtosis_negative", False)),
                decay_bound=bool(viol.get("decay_bound", False)),
            ),
            wall_time=float(rec.get("diagnostics", {}).get("wall_time", 0.0)),
        ))
    if not fits:
        raise CliError("fit file is empty")
    return fits


def cmd_compare(args) -> int:
    sidecar = json.loads(_read(args.truth))
    truths = [GroundTruthVoxel.from_dict(sidecar[k])
              for k in sorted(sidecar, key=int)]
    report_all = {}
    for path in args.fits:
        fits = _fits_from_jsonl(_read(path))
        if len(fits) != len(truths):
            raise CliError(
                f"{path} has {len(fits)} voxels but truth has {len(truths)}"
            )
        report = evaluate(fits, truths)
        name = fits[0].estimator
        report_all[f"{name}:{path}"] = report
        print(report.format_table(title=f"--- {name} ({path}) ---"))
        print()
    if args.json:
        payload = {k: json.loads(r.to_json()) for k, r in report_all.items()}
        _write(args.json, json.dumps(payload, indent=1))
    return 0


def cmd_metrics(args) -> int:
    fits = _fits_from_jsonl(_read(args.fits))
    lines = ["voxel,md,fa,mk,k_perp,snr,valid"]
    for i, fit in enumerate(fits):
        sm = scalar_metrics(fit.theta_d, fit.theta_w, fit.s0, fit.sigma2)
        lines.append(
            f"{i},{sm.md:.10g},{sm.fa:.10g},{sm.mk:.10g},"
            f"{sm.k_perp:.10g},{sm.snr:.10g},{int(sm.valid)}"
        )
    text = "\n".join(lines) + "\n"
    if args.out:
        _write(args.out, text)
    else:
        print(text, end="")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dkimle",
        description="Simulate, fit and evaluate diffusion kurtosis voxels.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="write a synthetic voxel dataset")
    p_sim.add_argument("--scenario", choices=sorted(SCENARIOS), default="dataset1")
    p_sim.add_argument("--snr", type=float, default=None,
                       help="signal-to-noise ratio (dataset3 uses its own ramp)")
    p_sim.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_sim.add_argument("--voxels", type=int, default=None,
                       help="override the scenario voxel count")
    p_sim.add_argument("--out", required=True, help="output path prefix")
    p_sim.set_defaults(func=cmd_simulate)

    p_fit = sub.add_parser("fit", help="fit every voxel of a table")
    p_fit.add_argument("--protocol", required=True)
    p_fit.add_argument("--data", required=True)
    p_fit.add_argument("--estimator", choices=("wls", "cwls", "mle"), default="mle")
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--seed", type=int, default=DEFAULT_SEED)
    p_fit.add_argument("--workers", type=int, default=None,
                       help=f"worker processes (default ${_WORKERS_ENV} or 1)")
    p_fit.add_argument("--max-sweeps", type=int, default=None)
    p_fit.add_argument("--grad-tol", type=float, default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_cmp = sub.add_parser("compare", help="evaluate fit outputs against a truth sidecar")
    p_cmp.add_argument("--truth", required=True)
    p_cmp.add_argument("--fits", nargs="+", required=True)
    p_cmp.add_argument("--json", default=None, help="also write the report as JSON")
    p_cmp.set_defaults(func=cmd_compare)

    p_met = sub.add_parser("metrics", help="scalar metric table from a fit output")
    p_met.add_argument("--fits", required=True)
    p_met.add_argument("--out", default=None)
    p_met.set_defaults(func=cmd_metrics)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
