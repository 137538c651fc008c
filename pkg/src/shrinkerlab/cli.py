"""Command line entry point ``shrinkerlab``.

Every subcommand exits with status 0 exactly when the checks it performs
pass; errors raised by the package give status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as diag
from . import flow as fl
from . import harness as hx
from . import spectral
from .errors import RegressionFailure, ShrinkerLabError
from .shrinkers import KINDS, ShrinkerSpec, make_shrinker

RESIDUAL_OK = 1e-6


def _make_shrinker(args) -> int:
    spec = ShrinkerSpec(kind=args.kind, n=args.n, p=args.p, q=args.q, n_vertices=args.n_vertices, tol=args.tol)
    res = make_shrinker(spec)
    hx.write_geometry(res.geometry, args.out, hx.shooting_provenance(spec, res))
    print(f"{args.kind}: residual {res.residual:.3e}, shooting parameter {res.shooting_parameter!r}")
    return 0 if res.residual <= RESIDUAL_OK else 1


def _eigens(args) -> int:
    g = hx.read_geometry(args.geometry)
    L = spectral.assemble_L(g)
    ep = spectral.first_eigenpair(L)
    payload = {"mu1": ep.eigenvalue, "phi1": ep.eigenfunction, "residual": ep.residual}
    hx.atomic_write(args.out, hx.dumps(payload))
    print(f"mu1 = {ep.eigenvalue!r} (residual {ep.residual:.2e})")
    positive = bool(np.all(ep.eigenfunction > 0.0))
    return 0 if positive else 1


def _flow(args) -> int:
    cfg = hx.load_config(args.config)
    out = Path(args.out) if args.out else cfg.output_dir
    base, prov, _ = hx.build_initial(cfg)
    results, artifacts = {}, {}
    out.mkdir(parents=True, exist_ok=True)
    start = hx.perturbed_initial(cfg, base, results, artifacts, out)
    traj = fl.run(hx.flow_config(cfg, start))
    hx.write_trajectory(traj, out / "trajectory.jsonl", out / "records.csv")
    print(f"{traj.termination} after {len(traj.step_times)} steps, {len(traj)} snapshots; singular time {traj.singular_time}")
    return 0 if traj.termination in ("blow_up", "reached_t_max") else 1


def _diagnose(args) -> int:
    traj = hx.read_trajectory(args.trajectory, mode=args.mode)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {"termination": traj.termination, "n_snapshots": len(traj)}
    ok = True
    sp = diag.sign_preservation(traj)
    report["sign_preservation"] = {"initial_label": sp.initial_label, "violations": sp.violations, "passed": sp.passed}
    ok &= sp.passed is not False
    rows = []
    if not sp.skipped:
        times, reps = diag.delta_series(traj, every=args.every)
        rows = [(r.time, r.delta_in, r.delta_out, r.min_Ztilde) for r in reps]
        report["delta_in_initial"] = reps[0].delta_in
        report["delta_in_min"] = min(r.delta_in for r in reps)
        if args.nested:
            direction = "inward" if sp.initial_label == "rescaled_mean_convex" else "outward"
            ns = diag.nestedness_check(traj, direction)
            report["nestedness"] = {"direction": direction, "violations": ns.violations}
            ok &= ns.passed
    hx.write_csv(out / "timeseries.csv", ("time", "delta_in", "delta_out", "min_Ztilde"), rows)
    if traj.termination == "blow_up":
        sing = diag.detect_and_classify(traj)
        report["singularity"] = sing.to_dict()
        ok &= sing.tangent_type != "unresolved"
    report["passed"] = bool(ok)
    hx.atomic_write(out / "report.json", hx.dumps(report))
    print(json.dumps(hx._jsonable({k: v for k, v in report.items() if k != "singularity"}), sort_keys=True))
    if "singularity" in report:
        s = report["singularity"]
        print(f"singularity: {s['tangent_type']} / {s['collapse_side']} at T={s['singular_time']}")
    return 0 if ok else 1


def _verify_identities(args) -> int:
    if args.trajectory:
        source = hx.read_trajectory(args.trajectory, mode="RMCF")
    else:
        source = hx.read_geometry(args.geometry)
    levels = tuple(int(x) for x in args.levels.split(","))
    rep = diag.verify_evolution_identities(source, levels=levels, time=args.time)
    rows = []
    for row in rep.rows():
        for lev, e in zip(rep.levels, row["spatial_errors"]):
            rows.append((row["identity"], "spatial", lev, e, row["spatial_order"]))
        for dt, e in zip(rep.dts, row["temporal_errors"]):
            rows.append((row["identity"], "temporal", dt, e, row["temporal_order"]))
    hx.write_csv(args.out, ("identity", "kind", "level_or_dt", "error", "order"), rows)
    so = list(rep.spatial_order.values())
    to = list(rep.temporal_order.values())
    for name in diag.IDENTITIES:
        print(f"{name:>10}: spatial order {rep.spatial_order.get(name)}, temporal order {rep.temporal_order.get(name)}")
    ok = bool(so) and min(so) >= args.spatial_min and bool(to) and min(to) >= args.temporal_min
    return 0 if ok else 1


def _run(args) -> int:
    if args.config:
        cfg = hx.load_config(args.config)
    else:
        cfg = hx.canned_config(args.experiment)
    if args.out:
        cfg = cfg.with_output_dir(args.out)
    manifest = hx.run_experiment(cfg)
    for name, chk in manifest.checks.items():
        print(f"{'PASS' if chk['passed'] else 'FAIL'} {name}: {chk['value']} (want {chk['threshold']})")
    print(f"manifest: {cfg.output_dir / 'manifest.json'}")
    return 0 if manifest.passed else 1


def _registry(args) -> int:
    if args.action == "freeze":
        data = hx.registry_freeze(args.path)
        for name, e in data["entries"].items():
            print(f"{name} = {e['value']!r}")
        return 0
    try:
        report = hx.registry_check(args.path)
    except RegressionFailure as exc:
        for name, r in exc.report.items():
            print(f"{'PASS' if r['passed'] else 'FAIL'} {name}: {r['actual']!r} (registered {r['expected']!r})")
        return 1
    for name, r in report.items():
        print(f"PASS {name}: {r['actual']!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="shrinkerlab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-shrinker", help="construct a self-shrinker and write its geometry JSON")
    p.add_argument("--kind", choices=KINDS, default="angenent_torus")
    p.add_argument("--n", type=int, default=1, help="dimension of the round shrinker (1 or 2)")
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--n-vertices", type=int, default=1024)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_make_shrinker)

    p = sub.add_parser("eigens", help="first eigenpair of the linearized operator")
    p.add_argument("--geometry", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_eigens)

    p = sub.add_parser("flow", help="run a flow from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="output directory (default: [experiment] output_dir)")
    p.set_defaults(func=_flow)

    p = sub.add_parser("diagnose", help="diagnostics of a stored trajectory")
    p.add_argument("--trajectory", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=fl.FLOW_MODES, help="flow mode when the .meta.json sidecar is missing")
    p.add_argument("--every", type=int, default=1)
    p.add_argument("--nested", action="store_true")
    p.set_defaults(func=_diagnose)

    p = sub.add_parser("verify-identities", help="finite-difference check of the evolution equations")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--trajectory")
    g.add_argument("--geometry")
    p.add_argument("--time", type=float)
    p.add_argument("--levels", default="128,256,512")
    p.add_argument("--spatial-min", type=float, default=1.8)
    p.add_argument("--temporal-min", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_verify_identities)

    p = sub.add_parser("run", help="run a canned experiment or a config file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("experiment", nargs="?", choices=hx.CANNED)
    g.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=_run)

    p = sub.add_parser("registry", help="freeze or check the registry of derived constants")
    p.add_argument("action", choices=("check", "freeze"))
    p.add_argument("--path", help="registry file (default: the packaged one)")
    p.set_defaults(func=_registry)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ShrinkerLabError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
