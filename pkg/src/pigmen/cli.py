"""Command-line entry point.

Subcommands: mesh gen, solve, train, eval, demo-gap, ablation, export.
Exit codes: 0 success, 1 numerical failure (divergence, non-convergence,
violated ordering), 2 usage or IO error. PIGMEN_THREADS caps the numeric
libraries' internal thread pools.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


def _apply_thread_cap() -> None:
    cap = os.environ.get("PIGMEN_THREADS")
    if not cap:
        return
    try:
        n = max(1, int(cap))
    except ValueError:
        print(f"warning: ignoring non-integer PIGMEN_THREADS={cap!r}", file=sys.stderr)
        return
    try:
        import threadpoolctl
        threadpoolctl.threadpool_limits(n)
    except ImportError:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pigmen",
        description="Physics-informed graph-mesh networks with differentiable "
                    "finite-element kernels")
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", help="mesh utilities")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command", required=True)
    p_gen = mesh_sub.add_parser("gen", help="generate a fixture mesh")
    p_gen.add_argument("generator",
                       choices=["rectangle", "annulus", "rings2d", "lshape3d", "elbow3d"])
    p_gen.add_argument("params", nargs="*", type=float)
    p_gen.add_argument("--out", required=True, help="output mesh file")
    p_gen.add_argument("--manifest", help="manifest JSON path (default: <out>.json)")

    p_solve = sub.add_parser("solve", help="classical FEM reference solve")
    p_solve.add_argument("--config", required=True)
    p_solve.add_argument("--out", required=True)
    p_solve.add_argument("--seed", type=int)

    p_train = sub.add_parser("train", help="train a model per config")
    p_train.add_argument("--config", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--seed", type=int)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a config")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--seed", type=int)

    p_gap = sub.add_parser("demo-gap",
                           help="demonstrate the autodiff missing-link derivative")
    p_gap.add_argument("--alpha", type=float, default=2.0)
    p_gap.add_argument("--beta", type=float, default=3.0)
    p_gap.add_argument("--gamma", type=float, default=0.0)
    p_gap.add_argument("--phi", default="x1_squared")
    p_gap.add_argument("--points", nargs="*", type=float, default=[0.5, 1.0, 1.5])
    p_gap.add_argument("--out")

    p_abl = sub.add_parser("ablation", help="train and compare model variants")
    p_abl.add_argument("--config", required=True, help="training-geometry config")
    p_abl.add_argument("--eval-config", required=True, help="test-geometry config")
    p_abl.add_argument("--out", required=True)
    p_abl.add_argument("--seed", type=int)

    p_exp = sub.add_parser("export", help="export a field for external viewers")
    p_exp.add_argument("--mesh", required=True)
    p_exp.add_argument("--field", required=True)
    p_exp.add_argument("--format", choices=["vtk_legacy", "csv"], required=True)
    p_exp.add_argument("--out", required=True)

    return parser


def _cmd_mesh_gen(args) -> int:
    from . import mesh as pmesh
    try:
        generated = pmesh.generate_mesh(args.generator, args.params)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    pmesh.save_mesh(generated, args.out)
    manifest_path = args.manifest or (str(args.out) + ".json")
    manifest = pmesh.mesh_manifest(generated, args.generator, args.params)
    pmesh.save_manifest(manifest, manifest_path)
    print(f"wrote {args.out} ({generated.n_nodes} nodes, "
          f"{generated.n_elements} elements) and {manifest_path}")
    return EXIT_OK


def _cmd_solve(args) -> int:
    from . import workflows as wf
    config = wf.load_config(args.config, seed_override=args.seed)
    report = wf.run_solve(config, args.out)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_train(args) -> int:
    from . import optim as po
    from . import workflows as wf
    config = wf.load_config(args.config, seed_override=args.seed)
    try:
        metrics = wf.run_train(config, args.out)
    except po.TrainingDivergedError as exc:
        print(f"training diverged: {exc} (history written to {args.out})",
              file=sys.stderr)
        return EXIT_NUMERICAL
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_eval(args) -> int:
    from . import workflows as wf
    config = wf.load_config(args.config, seed_override=args.seed)
    metrics = wf.run_eval(args.checkpoint, config, args.out)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_demo_gap(args) -> int:
    from . import workflows as wf
    report = wf.run_demo_gap(alpha=args.alpha, beta=args.beta, gamma=args.gamma,
                             phi_spec=args.phi, points=args.points,
                             out_dir=args.out)
    print(wf.format_demo_gap(report))
    return EXIT_OK


def _cmd_ablation(args) -> int:
    from . import workflows as wf
    config = wf.load_config(args.config, seed_override=args.seed)
    eval_config = wf.load_config(args.eval_config, seed_override=args.seed)
    table = wf.run_ablation(config, eval_config, args.out)
    print(wf.format_ablation(table))
    if any(row["diverged"] for row in table["rows"]):
        return EXIT_NUMERICAL
    if not all(table["orderings"].values()):
        return EXIT_NUMERICAL
    return EXIT_OK


def _cmd_export(args) -> int:
    from . import export as ex
    from . import mesh as pmesh
    from . import refsolver as rs
    mesh = pmesh.load_mesh(args.mesh)
    values = rs.load_field(args.field)
    if values.shape[0] != mesh.n_nodes:
        print(f"error: field has {values.shape[0]} rows, mesh has "
              f"{mesh.n_nodes} nodes", file=sys.stderr)
        return EXIT_USAGE
    if args.format == "vtk_legacy":
        ex.write_vtk_legacy(mesh, values, args.out)
    else:
        ex.write_csv(mesh, values, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


_DISPATCH = {
    "solve": _cmd_solve,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "demo-gap": _cmd_demo_gap,
    "ablation": _cmd_ablation,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    _apply_thread_cap()
    parser = build_parser()
    args = parser.parse_args(argv)

    from . import mesh as pmesh
    from . import refsolver as rs
    from . import workflows as wf

    try:
        if args.command == "mesh":
            return _cmd_mesh_gen(args)
        return _DISPATCH[args.command](args)
    except (FileNotFoundError, json.JSONDecodeError, wf.ConfigError,
            pmesh.MeshFormatError, pmesh.MeshValidationError,
            rs.FieldFormatError) as exc:
        # malformed or missing inputs
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (rs.ConvergenceError, ValueError) as exc:
        # numerical failures (degenerate elements, non-convergence, ...)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
