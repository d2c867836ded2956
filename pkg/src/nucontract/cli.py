"""Command-line front end.

Exit status: 0 success, 1 certificate or numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .contraction import certify, contract_system
from .dichotomy import DichotomyPlan, operator_for, test_dichotomy
from .errors import ConfigError, NucontractError
from .flow import fit_growth
from .spectrum import SweepPlan, compute_spectrum
from .sysmodel import BUILTINS, LinearSystem, builtin_example, load_system, serialize_system
from .triangular import similarity_residual, triangularize

__all__ = ["main", "build_parser", "write_json", "write_csv"]

COMMANDS = ("spectrum", "dichotomy", "triangularize", "contract", "certify", "example")
log = logging.getLogger("nucontract")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------- output

def _clean(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_clean(data), indent=2, sort_keys=True) + "\n")


def _cell(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return x


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(x) for x in row])


def _plot_manifest(out: Path, plots) -> None:
    write_json(out / "plots.json", {"plots": plots})


# ------------------------------------------------------------------ input

def _load(args) -> LinearSystem:
    if bool(args.config) == bool(args.example):
        raise UsageError("give exactly one of --config PATH or --example NAME")
    params = {k: getattr(args, k) for k in ("lambda0", "a", "lambda1")
              if getattr(args, k) is not None}
    if args.config:
        if params:
            raise UsageError("example parameters only apply to --example")
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        system = load_system(path)
    else:
        if args.example not in BUILTINS:
            raise UsageError(f"unknown example {args.example!r}; choose from {sorted(BUILTINS)}")
        system = builtin_example(args.example, params)
    if args.horizon is not None:
        system = system.with_horizon(args.horizon)
    return system


def _system_info(system: LinearSystem) -> dict:
    A = system.A
    info = {"label": system.label, "dim": system.dim, "horizon": system.horizon,
            "envelope": list(A.envelope), "parameters": dict(system.parameters),
            "reference_spectrum": [list(x) for x in system.reference_spectrum]
            if system.reference_spectrum else None}
    if hasattr(A, "entry_texts"):
        info["entries"] = A.entry_texts()
    return info


def _dichotomy_plan(args) -> DichotomyPlan:
    return DichotomyPlan(seed=args.seed)


def _sweep_plan(args) -> SweepPlan:
    return SweepPlan(tol=args.tol, dichotomy=_dichotomy_plan(args), n_jobs=args.n_jobs)


# --------------------------------------------------------------- commands

def _sweep_rows(spec):
    for lam, v in spec.samples:
        yield (lam, int(v.admits), v.projector_rank, v.alpha, v.eps, v.K, ";".join(v.flags))


def _cmd_spectrum(args, system, out):
    spec = compute_spectrum(system, _sweep_plan(args))
    log.info("growth %s", json.dumps(_clean(spec.growth.as_dict()), sort_keys=True))
    log.info("intervals %s", _clean(spec.intervals))
    write_csv(out / "sweep.csv", ["lambda", "admits", "rank", "alpha", "eps", "K", "flags"],
              _sweep_rows(spec))
    op = operator_for(system)
    write_csv(out / "checkpoints.csv", ["t", "log_norm_phi", "cond_phi"], op.checkpoint_table())
    _plot_manifest(out, [{"file": "sweep.csv", "x": "lambda", "y": ["admits", "rank"],
                          "kind": "step", "title": "dichotomy verdicts"},
                         {"file": "checkpoints.csv", "x": "t", "y": ["log_norm_phi"],
                          "kind": "line", "title": "ln |Phi(t,0)|"}])
    return {"spectrum": spec.as_dict()}, 0


def _cmd_dichotomy(args, system, out):
    if args.lam is None:
        raise UsageError("dichotomy needs --lambda")
    op = operator_for(system)
    verdict = test_dichotomy(op, args.lam, _dichotomy_plan(args))
    growth = fit_growth(op)
    log.info("verdict %s", json.dumps(_clean(verdict.as_dict()), sort_keys=True))
    write_csv(out / "checkpoints.csv", ["t", "log_norm_phi", "cond_phi"], op.checkpoint_table())
    return {"verdict": verdict.as_dict(), "growth": growth.as_dict()}, 0


def _cmd_triangularize(args, system, out):
    S, U = triangularize(system)
    grid = np.linspace(0.0, system.horizon, args.grid)
    res = similarity_residual(system, S, U, grid)
    S.write_csv(out / "transform.csv", grid)
    n = system.dim
    Uv = U(grid).reshape(grid.size, -1)
    write_csv(out / "triangular.csv", ["t"] + [f"U_{r}{c}" for r in range(n) for c in range(n)],
              (np.r_[t, row] for t, row in zip(grid, Uv)))
    info = {"method": U.meta.get("method"), "drift": U.meta.get("drift", 0.0),
            "lower_residual": U.lower_residual, "growth": list(U.growth),
            "similarity_residual": res, "transform": {"kind": S.kind, "upsilon": S.upsilon,
                                                      "M_upsilon": S.M_upsilon}}
    log.info("triangular %s", json.dumps(_clean(info), sort_keys=True))
    return {"triangular": info}, 0


def _write_contraction(out, output, grid):
    C = np.diagonal(output.C(grid), axis1=-2, axis2=-1)
    Bn = np.linalg.norm(output.B(grid), 2, axis=(-2, -1))
    n = output.n
    write_csv(out / "grid.csv", ["t"] + [f"C_{r}" for r in range(n)] + ["norm_B"],
              (np.r_[t, c, b] for t, c, b in zip(grid, C, Bn)))
    plots = [{"file": "grid.csv", "x": "t", "y": [f"C_{r}" for r in range(n)] + ["norm_B"],
              "kind": "line", "title": "diagonal C(t) and |B(t)|"}]
    for bi, blk in enumerate(output.blocks):
        for ch in blk.channels:
            sm, sched = ch.smoothed, ch.schedule
            name = f"schedule_{bi}_{ch.index}.csv"
            write_csv(out / name, ["t", "c", "lambda", "c_bar", "lambda_bar", "log_mu"],
                      zip(grid, sched.c(grid), sched.lam(grid), sm.c_bar(grid),
                          sm.lam_bar(grid), sm.log_mu(grid)))
            plots.append({"file": name, "x": "t", "y": ["c", "c_bar", "lambda", "log_mu"],
                          "kind": "line", "title": f"block {bi} channel {ch.index}"})
            log.info("block %d channel %d constants %s", bi, ch.index,
                     json.dumps(_clean(ch.as_dict()), sort_keys=True))
    _plot_manifest(out, plots)


def _cmd_contract(args, system, out):
    output = contract_system(system, args.delta, sweep=_sweep_plan(args))
    if args.corrupt != 1.0:
        output = output.corrupted(args.corrupt)
    cert = certify(output)
    grid = np.linspace(0.0, system.horizon, args.grid)
    _write_contraction(out, output, grid)
    cert_dict = cert.as_dict()
    cert_dict["seed"] = args.seed
    write_json(out / "certificate.json", cert_dict)
    for c in cert.clauses:
        log.info("clause %s pass=%s worst_t=%s margin=%s", c.name, c.passed, c.worst_t, c.margin)
    status = 0 if cert.passed else 1
    result = {"contraction": output.as_dict(), "certificate": cert_dict}
    if args.command == "certify":
        result = {"certificate": cert_dict}
    return result, status


def _cmd_example(args, system, out):
    text = serialize_system(system)
    (out / "system.toml").write_text(text)
    sys.stdout.write(text)
    return {}, 0


HANDLERS = {"spectrum": _cmd_spectrum, "dichotomy": _cmd_dichotomy,
            "triangularize": _cmd_triangularize, "contract": _cmd_contract,
            "certify": _cmd_contract, "example": _cmd_example}


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nucontract",
                                description="Nonuniform dichotomy spectra and contraction.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("command", choices=COMMANDS)
    src = p.add_argument_group("input")
    src.add_argument("--config", metavar="PATH", help="TOML system description")
    src.add_argument("--example", metavar="NAME", help=f"built-in: {', '.join(sorted(BUILTINS))}")
    src.add_argument("--lambda0", type=float, help="example1/planar parameter")
    src.add_argument("--a", type=float, help="example1/planar parameter")
    src.add_argument("--lambda1", type=float, help="example2/planar parameter")
    src.add_argument("--horizon", type=float, help="truncation time")
    run = p.add_argument_group("run")
    run.add_argument("--delta", type=float, default=0.5, help="contraction smallness")
    run.add_argument("--lambda", dest="lam", type=float, help="shift for 'dichotomy'")
    run.add_argument("--tol", type=float, default=0.05, help="spectral endpoint tolerance")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--n-jobs", type=int, default=1)
    run.add_argument("--grid", type=int, default=2001, help="points in CSV dumps")
    run.add_argument("--corrupt", type=float, default=1.0,
                     help="scale B before certifying (negative control)")
    run.add_argument("--out", metavar="DIR", default="nucontract-out")
    return p


def _setup_log(out: Path) -> logging.FileHandler:
    handler = logging.FileHandler(out / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    return handler


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.tol <= 0 or args.delta <= 0 or args.grid < 2:
            raise UsageError("--tol and --delta must be positive and --grid at least 2")
        system = _load(args)
    except (UsageError, ConfigError, OSError) as exc:
        print(f"nucontract: error: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"nucontract: error: cannot create {out}: {exc}", file=sys.stderr)
        return 2
    handler = _setup_log(out)
    manifest = {"command": args.command, "input": args.config or args.example,
                "parameters": dict(system.parameters), "horizon": system.horizon,
                "seed": args.seed, "tol": args.tol, "delta": args.delta, "version": __version__}
    log.info("manifest %s", json.dumps(_clean(manifest), sort_keys=True))
    start = time.perf_counter()
    try:
        result, status = HANDLERS[args.command](args, system, out)
    except UsageError as exc:
        print(f"nucontract: error: {exc}", file=sys.stderr)
        return 2
    except NucontractError as exc:
        err = {"error": type(exc).__name__, "message": str(exc), "stage": exc.stage, "t": exc.t}
        log.error("failure %s", json.dumps(_clean(err), sort_keys=True))
        write_json(out / "result.json", {"manifest": manifest, "system": _system_info(system),
                                         "failure": err})
        print(f"nucontract: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    finally:
        log.info("elapsed %.3f s", time.perf_counter() - start)
        log.removeHandler(handler)
        handler.close()
    write_json(out / "result.json", {"manifest": manifest, "system": _system_info(system),
                                     **result})
    if args.command != "example":
        print(json.dumps(_clean(_summary(args.command, result)), sort_keys=True))
    return status


def _summary(command, result) -> dict:
    if command == "spectrum":
        return {"intervals": result["spectrum"]["intervals"]}
    if command == "dichotomy":
        v = result["verdict"]
        return {"admits": v["admits"], "rank": v["rank"]}
    if command == "triangularize":
        return {"similarity_residual": result["triangular"]["similarity_residual"]}
    cert = result["certificate"]
    return {"pass": cert["pass"], "clauses": {c["name"]: c["pass"] for c in cert["clauses"]}}


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
