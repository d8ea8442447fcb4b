"""Command-line interface.

Subcommands: ``run`` a configured simulation, ``compare-optimizers`` on one
implicit step, ``validate`` the derivative/solver checks, and ``scene`` to
materialize a built-in scene's mesh and a starter config.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, build_scene, load_config, solver_config
from .geometry import write_tet_mesh
from .runner import StepFailure, compare_optimizers, run_simulation
from .scenes import BUILTIN_SCENES, built_in_scene
from .validate import report_lines, run_validation


def _add_common(parser):
    parser.add_argument("config", help="path to a scene config file")
    parser.add_argument("--frames", type=int, help="override frame count")
    parser.add_argument("--dt", type=float, help="override timestep")
    parser.add_argument("--solver", help="override solver method")
    parser.add_argument("--workers", type=int, help="override worker count")
    parser.add_argument("--seed", type=int, help="override random seed")


def _load(args):
    cfg = load_config(args.config)
    if args.frames is not None:
        cfg.frames = args.frames
    if args.dt is not None:
        cfg.dt = args.dt
    if args.solver is not None:
        cfg.method = args.solver
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args)
    scene = build_scene(cfg)
    solver_cfg = solver_config(cfg, scene)
    try:
        stats = run_simulation(
            scene, solver_cfg, cfg.frames, cfg.fps, cfg.slow_motion,
            outdir=cfg.output, write_meshes=cfg.write_meshes, method=cfg.method,
        )
    except StepFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"residual history: {exc.residuals[-8:]}", file=sys.stderr)
        return 2
    print(f"completed {cfg.frames} frames of {scene.name!r} "
          f"({stats.total_broken} bonds broken) -> {cfg.output}")
    return 0


def cmd_compare(args) -> int:
    cfg = _load(args)
    scene = build_scene(cfg)
    solver_cfg = solver_config(cfg, scene)
    _, summary = compare_optimizers(scene, solver_cfg, outdir=cfg.output)
    width = max(len(m) for m in summary)
    print(f"tolerance: {solver_cfg.epsilon:.3e} (gradient norm)")
    for method, s in summary.items():
        iters = s["iterations"] if s["iterations"] is not None else "not reached"
        print(f"{method:<{width}}  iterations-to-tolerance: {iters}  "
              f"constraint-at-best: {s['constraint_at_best']:.3e}")
    print(f"traces -> {cfg.output}/convergence.csv")
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args)
    results = run_validation(seed=cfg.seed, corrupt_gradient=args.corrupt)
    for line in report_lines(results):
        print(line)
    return 0 if all(r.passed for r in results) else 1


def cmd_scene(args) -> int:
    if args.name not in BUILTIN_SCENES:
        print(f"error: unknown scene {args.name!r}; available: "
              f"{', '.join(sorted(BUILTIN_SCENES))}", file=sys.stderr)
        return 2
    scene = built_in_scene(args.name, args.resolution)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh_path = out / f"{args.name}.tetmesh"
    write_tet_mesh(mesh_path, scene.mesh.vertices, scene.mesh.tets)
    config_path = out / f"{args.name}.cfg"
    config_path.write_text(
        "\n".join([
            "[scene]",
            "source = builtin",
            f"name = {args.name}",
            f"output = out_{args.name}",
            "frames = 240",
            "",
            "[solver]",
            "method = second-order",
            "epsilon = auto",
        ]) + "\n"
    )
    print(f"wrote {mesh_path} and {config_path} "
          f"({scene.elements.n} elements, {scene.bonds.n} bonds)")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="bdem",
        description="bonded discrete element simulation with an implicit "
                    "quaternion-manifold solver",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a simulation from a config file")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare-optimizers",
                           help="benchmark all solvers on one implicit step")
    _add_common(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_val = sub.add_parser("validate", help="run derivative and solver checks")
    _add_common(p_val)
    p_val.add_argument("--corrupt", action="store_true",
                       help="negative control: corrupt one gradient on purpose")
    p_val.set_defaults(func=cmd_validate)

    p_scene = sub.add_parser("scene", help="write a built-in scene mesh + config")
    p_scene.add_argument("name")
    p_scene.add_argument("--out", default=".", help="output directory")
    p_scene.add_argument("--resolution", type=int, default=None)
    p_scene.set_defaults(func=cmd_scene)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
