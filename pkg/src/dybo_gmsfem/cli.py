"""Command-line entry point: ``dybo-gmsfem {run,compare,cache-offline,export-fields}``.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, load_config
from .dybo import DegenerateModeError, NumericalFailure
from .experiment import (
    HashMismatch, build_problem, compare_runs, load_run, offline_key, run_experiment, save_offline,
)
from .fem import NotPositiveDefiniteError
from .grid import build_grids
from .msbasis import RankDeficiencyError, build_offline_space

logger = logging.getLogger("dybo_gmsfem")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    summary = run_experiment(cfg, args.out)
    print(f"wrote {summary.directory}")
    for name, fine_s, prop_s in summary.cpu:
        print(f"  cpu {name:6s} fine-scale {fine_s:10.4f}s  proposed {prop_s:10.4f}s")
    if summary.errors:
        worst = max(summary.errors, key=lambda r: r[3] if r[2] == "end" else -1)
        print(f"  largest end-of-step error: {worst[1]} at t={worst[0]:g}: {100 * worst[3]:.4f}%")
    return EXIT_OK


def _run_mass(directory: Path):
    cfg = load_config(directory / "config.ini")
    g = build_grids(cfg.grid.n_coarse, cfg.grid.n_fine_per_coarse)
    from .fem import assemble_mass
    return assemble_mass(g, dirichlet=g.boundary_nodes).matrix


def _cmd_compare(args) -> int:
    run_dir, ref_dir = Path(args.run_dir), Path(args.oracle_dir)
    for d in (run_dir, ref_dir):
        if not d.is_dir():
            raise ConfigError(f"directory not found: {d}")
    M = _run_mass(ref_dir)
    out = Path(args.out) if args.out else run_dir / "compare"
    compare_runs(run_dir, ref_dir, M, out)
    print((out / "summary.txt").read_text(), end="")
    return EXIT_OK


def _cmd_cache_offline(args) -> int:
    cfg = load_config(args.config)
    problem = build_problem(cfg)
    space = build_offline_space(problem.grid, problem.model.abar, cfg.online.l_per_node)
    key = offline_key(cfg)
    cache_dir = Path(args.out or cfg.output.cache_dir or ".")
    path = save_offline(space, cache_dir / f"offline-{key}.npz", key)
    print(f"wrote {path} ({space.n_d} basis functions)")
    return EXIT_OK


def _nodal_grid(values: np.ndarray, g) -> np.ndarray:
    """Interior dof vector -> (nf+1) x (nf+1) nodal matrix, top row at y = 1."""
    full = np.zeros(g.n_nodes)
    full[g.interior_nodes] = values
    return full.reshape(g.nf + 1, g.nf + 1)[::-1]


def _cmd_export(args) -> int:
    directory = Path(args.run_dir)
    meta, fields = load_run(directory)
    cfg = load_config(directory / "config.ini")
    g = build_grids(cfg.grid.n_coarse, cfg.grid.n_fine_per_coarse)
    steps = fields["steps"].tolist()
    if args.time is None:
        n = steps[-1]
    else:
        matches = [s for s, t in zip(steps, fields["times"]) if abs(t - args.time) < 1e-9]
        if not matches:
            raise ConfigError(f"no exported fields at t={args.time}; available: {fields['times'].tolist()}")
        n = matches[0]
    out = Path(args.out or directory / "export")
    out.mkdir(parents=True, exist_ok=True)
    mean, modes = fields[f"mean_{n}"], fields[f"modes_{n}"]
    np.savetxt(out / f"mean_{n:06d}.txt", _nodal_grid(mean, g))
    np.savetxt(out / f"var_{n:06d}.txt", _nodal_grid(np.sum(modes**2, axis=1), g))
    for k in range(modes.shape[1]):
        np.savetxt(out / f"u{k + 1}_{n:06d}.txt", _nodal_grid(modes[:, k], g))
    print(f"wrote fields of step {n} to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dybo-gmsfem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment described by an INI config")
    r.add_argument("config")
    r.add_argument("-o", "--out", help="artifacts directory (default: [output] directory)")
    r.set_defaults(func=_cmd_run)

    c = sub.add_parser("compare", help="compare a run directory against a reference run directory")
    c.add_argument("run_dir")
    c.add_argument("oracle_dir")
    c.add_argument("-o", "--out", help="report directory (default: RUN_DIR/compare)")
    c.set_defaults(func=_cmd_compare)

    k = sub.add_parser("cache-offline", help="build and store the offline space of a config")
    k.add_argument("config")
    k.add_argument("-o", "--out", help="cache directory (default: [output] cache_dir or .)")
    k.set_defaults(func=_cmd_cache_offline)

    e = sub.add_parser("export-fields", help="write mean/variance/mode fields of a run as text matrices")
    e.add_argument("run_dir")
    e.add_argument("-t", "--time", type=float, help="report time to export (default: last)")
    e.add_argument("-o", "--out", help="output directory (default: RUN_DIR/export)")
    e.set_defaults(func=_cmd_export)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, HashMismatch, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DegenerateModeError, NotPositiveDefiniteError, RankDeficiencyError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        state = getattr(exc, "state", None)
        if state is not None:
            dump = Path("dybo-failure-state.npz")
            np.savez(dump, u0=state.u0, U=state.U, A=state.A, n=state.n, t=state.t)
            print(f"state dumped to {dump}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
