"""Command-line entry point: ``polyot {transport,curvle,filaments,bench,check}``.

Every option can also be given in a JSON file passed with ``--config``;
keys are the long option names with dashes replaced by underscores.
Command-line flags override the file.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import bench as bench_mod
from .checks import run_checks
from .errors import PolyotError
from .io import (image_to_diracs, load_catalog, random_walk_polyline, read_pgm, read_polyline,
                 render_svg, serpentine_polyline, write_manifest, write_polyline)
from .shape import AdmmConfig, KinematicConstraints, ShapeConfig, optimize_polyline
from .solvers import METHODS, SolverConfig, solve

log = logging.getLogger("polyot")

INITS = ("random-walk", "serpentine")


@dataclass
class RunConfig:
    # input: exactly one of image / points
    image: Optional[str] = None
    mode: str = "bright"
    threshold: float = 0.0
    points: Optional[str] = None
    columns: Optional[list] = None
    mass_column: Optional[str] = None
    # polyline
    polyline: Optional[str] = None
    init: str = "random-walk"
    segments: int = 100
    seed: int = 0
    disjoint: bool = False
    # solver
    method: str = "hybrid"
    grad_tol: float = 1e-8
    max_iter: int = 1000
    # shape optimisation
    outer_iter: int = 200
    grad_threshold: float = 1e-3
    step_scale: float = 0.5
    backtracking: bool = False
    K1: Optional[float] = None
    K2: Optional[float] = None
    dump_every: Optional[int] = None
    # bench
    bench_mode: str = "solvers"
    n: int = 1000
    p: int = 100
    seeds: Optional[list] = None
    iterations: int = 1000
    thread_counts: Optional[list] = None
    # output / runtime
    out: str = "polyot-out"
    threads: Optional[int] = None
    verbose: bool = False

    def validate(self, command: str):
        needs_input = command in ("transport", "curvle", "filaments", "check")
        if needs_input and (self.image is None) == (self.points is None):
            raise SystemExit("error: give exactly one input source (--image or --points)")
        if self.segments < 1:
            raise SystemExit("error: --segments must be at least 1")
        if self.init not in INITS:
            raise SystemExit(f"error: --init must be one of {INITS}")
        if self.method not in METHODS:
            raise SystemExit(f"error: --method must be one of {METHODS}")


def _add_input(p):
    g = p.add_argument_group("input")
    g.add_argument("--image", help="grayscale PGM image")
    g.add_argument("--mode", choices=["bright", "dark"], help="pixel weighting")
    g.add_argument("--threshold", type=float, help="drop pixels below threshold * max weight")
    g.add_argument("--points", help="CSV point cloud / catalog")
    g.add_argument("--columns", nargs="+", help="coordinate columns (names or indices)")
    g.add_argument("--mass-column", help="optional mass column")


def _add_polyline(p):
    g = p.add_argument_group("polyline")
    g.add_argument("--polyline", help="initial polyline JSON (overrides --init)")
    g.add_argument("--init", choices=INITS)
    g.add_argument("--segments", type=int, help="segment count p of the initial polyline")
    g.add_argument("--seed", type=int)
    g.add_argument("--disjoint", action="store_true", default=argparse.SUPPRESS,
                   help="odd segments are breaks (separate pieces)")


def _add_solver(p):
    g = p.add_argument_group("transport solver")
    g.add_argument("--method", choices=METHODS)
    g.add_argument("--grad-tol", type=float)
    g.add_argument("--max-iter", type=int)


def _add_shape(p):
    g = p.add_argument_group("shape optimisation")
    g.add_argument("--outer-iter", type=int)
    g.add_argument("--grad-threshold", type=float, help="stop when max |dG/dP| is below this")
    g.add_argument("--step-scale", type=float)
    g.add_argument("--backtracking", action="store_true", default=argparse.SUPPRESS)
    g.add_argument("--K1", type=float, help="max segment length")
    g.add_argument("--K2", type=float, help="max second difference")
    g.add_argument("--dump-every", type=int, help="write the polyline every k iterations")


def _add_common(p):
    p.add_argument("--config", help="JSON configuration file")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help="worker threads (default: available cores)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polyot", description=__doc__.splitlines()[0],
                                     argument_default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    specs = {
        "transport": ("solve the dual for a fixed polyline", (_add_input, _add_polyline, _add_solver)),
        "curvle": ("fit one continuous polyline to an image or point cloud",
                   (_add_input, _add_polyline, _add_solver, _add_shape)),
        "filaments": ("fit disjoint segments to a point catalog",
                      (_add_input, _add_polyline, _add_solver, _add_shape)),
        "bench": ("solver comparison or thread scaling", ()),
        "check": ("genericity report and finite-difference self-tests",
                  (_add_input, _add_polyline)),
    }
    for name, (help_, adders) in specs.items():
        p = sub.add_parser(name, help=help_, description=help_,
                           argument_default=argparse.SUPPRESS)
        for add in adders:
            add(p)
        if name == "bench":
            p.add_argument("--bench-mode", choices=["solvers", "scaling"])
            p.add_argument("--n", type=int)
            p.add_argument("--p", type=int)
            p.add_argument("--seeds", type=int, nargs="+")
            p.add_argument("--iterations", type=int)
            p.add_argument("--thread-counts", type=int, nargs="+")
        _add_common(p)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the JSON file, then explicit flags."""
    values = {}
    cfg_path = getattr(args, "config", None)
    if cfg_path:
        try:
            values.update(json.loads(Path(cfg_path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise SystemExit(f"error: cannot read config {cfg_path}: {exc}")
    values.update({k: v for k, v in vars(args).items() if k not in ("command", "config")})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise SystemExit(f"error: unknown configuration keys {unknown}")
    cfg = RunConfig(**values)
    cfg.validate(args.command)
    return cfg


def _load_measure(cfg: RunConfig):
    if cfg.image is not None:
        return image_to_diracs(read_pgm(cfg.image), cfg.mode, cfg.threshold)
    return load_catalog(cfg.points, cfg.columns, cfg.mass_column)


def _initial_polyline(cfg: RunConfig, mu, disjoint: bool):
    if cfg.polyline is not None:
        nu = read_polyline(cfg.polyline)
        if nu.disjoint_mode != disjoint:
            nu = type(nu).from_vertices(nu.vertices, disjoint)
        return nu
    lo = mu.positions.min(axis=0)
    hi = mu.positions.max(axis=0)
    box = (lo, hi)
    if cfg.init == "serpentine":
        return serpentine_polyline(cfg.segments, box, disjoint_mode=disjoint)
    return random_walk_polyline(cfg.segments, cfg.seed, box, disjoint_mode=disjoint)


def _solver_config(cfg: RunConfig) -> SolverConfig:
    return SolverConfig(method=cfg.method, grad_tol=cfg.grad_tol, outer_max=cfg.max_iter,
                        threads=cfg.threads, seed=cfg.seed)


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_transport(cfg: RunConfig) -> int:
    mu = _load_measure(cfg)
    nu = _initial_polyline(cfg, mu, cfg.disjoint)
    phi, hist = solve(mu, nu, None, _solver_config(cfg))
    out = _out_dir(cfg)
    ev = hist.final
    np.savetxt(out / "phi.csv", np.column_stack([phi, ev.cell_mass]), delimiter=",",
               header="phi,cell_mass", comments="", fmt="%.17g")
    hist.to_csv(out / "history.csv")
    write_polyline(out / "polyline.json", nu, seed=cfg.seed)
    write_manifest(out / "manifest.json", asdict(cfg), cfg.seed,
                   {"phi": "phi.csv", "history": "history.csv", "polyline": "polyline.json"})
    print(f"W2^2 = {ev.cost:.12g}  |grad| = {ev.grad_norm:.3e}  iterations = {hist.iterations}"
          f"  empty cells = {ev.empty_cells}  converged = {hist.converged}")
    return 0 if hist.converged else 2


def _run_shape(cfg: RunConfig, disjoint: bool) -> int:
    mu = _load_measure(cfg)
    nu0 = _initial_polyline(cfg, mu, disjoint)
    out = _out_dir(cfg)
    constraints = None
    if cfg.K1 is not None or cfg.K2 is not None:
        constraints = KinematicConstraints(cfg.K1 if cfg.K1 is not None else np.inf,
                                           cfg.K2 if cfg.K2 is not None else np.inf)
    frames = out / "frames"

    def dump(it, nu):
        frames.mkdir(exist_ok=True)
        write_polyline(frames / f"polyline_{it:05d}.json", nu, iteration=it)

    shape_cfg = ShapeConfig(max_iter=cfg.outer_iter, grad_threshold=cfg.grad_threshold,
                            step_scale=cfg.step_scale, constraints=constraints,
                            admm=AdmmConfig(), backtracking=cfg.backtracking,
                            dump_every=cfg.dump_every, dump=dump)
    nu, hist, _ = optimize_polyline(mu, nu0, _solver_config(cfg), shape_cfg)
    write_polyline(out / "initial.json", nu0, seed=cfg.seed, init=cfg.init)
    write_polyline(out / "polyline.json", nu, seed=cfg.seed)
    hist.to_csv(out / "shape_history.csv")
    render_svg(nu, out / "polyline.svg", mu if mu.n <= 20000 else None)
    write_manifest(out / "manifest.json", asdict(cfg), cfg.seed,
                   {"polyline": "polyline.json", "initial": "initial.json",
                    "history": "shape_history.csv", "render": "polyline.svg"})
    first, last = hist.records[0], hist.records[-1]
    print(f"G: {first.G:.10g} -> {last.G:.10g}  max|dG/dP| = {last.grad_inf:.3e}"
          f"  outer iterations = {last.iteration}  converged = {hist.converged}")
    return 0


def cmd_bench(cfg: RunConfig) -> int:
    out = _out_dir(cfg)
    if cfg.bench_mode == "scaling":
        rows = bench_mod.scaling(cfg.n, cfg.p, cfg.seed, tuple(cfg.thread_counts or (1, 2, 4, 8)))
        bench_mod.write_rows(rows, out / "scaling.csv")
        print(bench_mod.format_rows(rows))
        if not all(r.identical for r in rows):
            print("error: results differ across thread counts", file=sys.stderr)
            return 1
        return 0
    rows = bench_mod.compare_solvers(cfg.n, cfg.p, tuple(cfg.seeds or (cfg.seed,)),
                                     cfg.iterations, threads=cfg.threads)
    bench_mod.write_rows(rows, out / "solvers.csv")
    print(bench_mod.format_rows(rows))
    return 0


def cmd_check(cfg: RunConfig) -> int:
    mu = _load_measure(cfg)
    nu = _initial_polyline(cfg, mu, cfg.disjoint)
    report = run_checks(mu, nu, seed=cfg.seed)
    for k, v in report.items():
        print(f"{k:32s} {v}")
    bad = (report["gradient_fd_error"] > 1e-6 or report["hessian_fd_error"] > 1e-5
           or report.get("shape_gradient_fd_rel_error", 0.0) > 1e-4)
    if report["genericity_violations"]:
        print("warning: the instance violates genericity; derivatives may jump", file=sys.stderr)
    return 1 if bad else 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    logging.basicConfig(level=logging.INFO if cfg.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "transport":
            return cmd_transport(cfg)
        if args.command == "curvle":
            return _run_shape(cfg, cfg.disjoint)
        if args.command == "filaments":
            return _run_shape(cfg, True)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_check(cfg)
    except PolyotError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
