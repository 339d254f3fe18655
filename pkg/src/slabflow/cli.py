"""Command-line interface: run, sweep, adapt-demo, and validate subcommands."""

import argparse
import csv
import dataclasses
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunManifest, parse_config
from .timeslab import SimConfig, run_simulation


def _default_out():
    return os.environ.get("SLABFLOW_OUT", ".")


def _add_config_flags(parser):
    parser.add_argument("--config", help="flat key = value config file")
    for f in dataclasses.fields(SimConfig):
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, default=None, metavar="V")


def _collect_overrides(args):
    return {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(SimConfig)
        if getattr(args, f.name) is not None
    }


def _print_record(rec):
    print(
        f"slab {rec.slab:3d} iter {rec.iteration:3d}  "
        f"sqrt_L2 {rec.sqrt_l2:.6e}  nodes {rec.nodes:6d}  "
        f"tets {rec.tets:7d}  {rec.seconds:6.2f} s",
        flush=True,
    )


def _run_one(config, outdir, quiet=False):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(config, outdir)
    manifest.write()
    try:
        trace, state = run_simulation(
            config, outdir, log=None if quiet else _print_record
        )
    except Exception:
        manifest.finish(status="failed")
        raise
    manifest.finish(status="complete")
    return trace, state


def cmd_run(args):
    config = parse_config(args.config, _collect_overrides(args))
    trace, _ = _run_one(config, args.out, quiet=args.quiet)
    print(f"run complete: tail residual {trace.tail_residual():.6e}, {args.out}")
    return 0


def _tail_from_csv(path, last=5):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    final_slab = max(int(r["slab"]) for r in rows)
    tail = [float(r["sqrt_L2"]) for r in rows if int(r["slab"]) == final_slab][-last:]
    return float(np.median(tail))


def cell_dirname(sigma, dt):
    return f"sigma{sigma:g}_dt{dt:g}"


def cmd_sweep(args):
    if args.sigma is None or args.dt is None:
        raise ConfigError("sweep requires --sigma and --dt lists")
    sigmas = [float(s) for s in args.sigma.split(",")]
    dts = [float(s) for s in args.dt.split(",")]
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    overrides = _collect_overrides(args)
    overrides.pop("sigma", None)
    overrides.pop("dt", None)
    for sigma in sigmas:
        for dt in dts:
            cell = root / cell_dirname(sigma, dt)
            if RunManifest.is_complete(cell):
                print(f"skipping complete cell {cell}")
                continue
            config = parse_config(
                args.config, {**overrides, "sigma": sigma, "dt": dt}
            )
            print(f"running cell {cell}")
            _run_one(config, cell, quiet=args.quiet)
    with open(root / "summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(("sigma", "dt", "tail_residual"))
        for sigma in sigmas:
            for dt in dts:
                cell = root / cell_dirname(sigma, dt)
                tail = _tail_from_csv(cell / "residuals.csv")
                w.writerow((repr(sigma), repr(dt), repr(tail)))
    print(f"sweep complete: {root / 'summary.csv'}")
    return 0


def cmd_adapt_demo(args):
    from .demo import FUNCTIONS, run_adapt_demo
    from .vtk_io import write_vtk

    if args.function not in FUNCTIONS:
        raise ConfigError(f"unknown demo function {args.function!r}")
    sigmas = [float(s) for s in args.sigma.split(",")]
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    log = None if args.quiet else lambda msg: print(msg, flush=True)
    results = []
    for sigma in sigmas:
        res = run_adapt_demo(
            sigma,
            function=args.function,
            h0=args.h0,
            dt=args.dt,
            h_max=args.h_max,
            rounds=args.rounds,
            max_sweeps=args.sweeps,
            log=log,
        )
        results.append(res)
        func = FUNCTIONS[args.function]
        write_vtk(
            res.mesh,
            {"f": func(res.mesh.nodes)},
            outdir / f"adapted_sigma{sigma:g}.vtk",
            metric=res.metric.tensors,
        )
    with open(outdir / "error_report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(
            ("sigma", "nodes", "tets", "l2_error", "pct_in_band", "min_quality", "defects")
        )
        for r in results:
            w.writerow(
                (
                    repr(r.sigma),
                    r.nodes,
                    r.tets,
                    repr(r.l2_error),
                    repr(r.pct_in_band),
                    repr(r.min_quality),
                    r.defects,
                )
            )
    for r in results:
        print(
            f"sigma={r.sigma:g}: nodes={r.nodes} l2_error={r.l2_error:.4e} "
            f"band={r.pct_in_band:.1f}% defects={r.defects} ({r.seconds:.1f} s)"
        )
    return 0


def cmd_validate(args):
    from .mesh import signed_volumes
    from .vtk_io import read_vtk

    nodes, tets, fields, metric = read_vtk(args.mesh)
    problems = []
    if tets.min() < 0 or tets.max() >= len(nodes):
        problems.append("cell indices out of range")
    vols = signed_volumes(nodes, tets)
    n_inv = int((vols <= 0).sum())
    if n_inv:
        problems.append(f"{n_inv} inverted or degenerate cells")
    faces = np.sort(
        tets[:, [[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]]].reshape(-1, 3), axis=1
    )
    _, counts = np.unique(faces, axis=0, return_counts=True)
    n_bad = int((counts > 2).sum())
    if n_bad:
        problems.append(f"{n_bad} faces shared by more than two cells")
    print(
        f"{args.mesh}: {len(nodes)} nodes, {len(tets)} tets, "
        f"{len(fields)} fields, metric={'yes' if metric is not None else 'no'}"
    )
    if problems:
        for p in problems:
            print(f"  DEFECT: {p}")
        return 1
    print("  mesh is valid")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="slabflow",
        description="Timespace viscous fingering on adapted tetrahedral meshes",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a single simulation")
    _add_config_flags(p_run)
    p_run.add_argument("--out", default=_default_out(), help="output directory")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a sigma x dt parameter sweep")
    _add_config_flags(p_sweep)
    p_sweep.add_argument("--out", default=_default_out(), help="sweep root directory")
    p_sweep.add_argument("--quiet", action="store_true")
    p_sweep.set_defaults(func=cmd_sweep)

    p_demo = sub.add_parser("adapt-demo", help="adapt a mesh to an analytic function")
    p_demo.add_argument("--function", default="tanh-ring")
    p_demo.add_argument("--sigma", required=True, help="value or comma list")
    p_demo.add_argument("--h0", type=float, default=0.1)
    p_demo.add_argument("--dt", type=float, default=0.35)
    p_demo.add_argument("--h-max", type=float, default=0.3, dest="h_max")
    p_demo.add_argument("--rounds", type=int, default=3)
    p_demo.add_argument("--sweeps", type=int, default=5)
    p_demo.add_argument("--out", default=_default_out(), help="output directory")
    p_demo.add_argument("--quiet", action="store_true")
    p_demo.set_defaults(func=cmd_adapt_demo)

    p_val = sub.add_parser("validate", help="check a VTK mesh file")
    p_val.add_argument("mesh", help="path to a legacy VTK unstructured grid")
    p_val.set_defaults(func=cmd_validate)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
