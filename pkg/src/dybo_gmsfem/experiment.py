"""Experiment orchestration shared by the CLI, the estimator facade and the tests."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import __version__
from .config import ExperimentConfig, parse_custom, write_config
from .dybo import (
    AssembledOperators, DyboIntegrator, DyboState, assemble_operators, fine_operators, init_state, recast,
)
from .gpc import GpcSpace
from .grid import GridPair, build_grids
from .media import (
    EXAMPLE1_FLUCTUATIONS, EXAMPLE2_FLUCTUATIONS, CoefficientModel, high_contrast_mean, raster_import, trig_field,
)
from .msbasis import OfflineSpace, build_offline_space
from .online import OnlineDyboIntegrator
from .oracle import config_hash, function_errors, gpc_galerkin_solve, kl_extract

logger = logging.getLogger(__name__)

CACHE_VERSION = 2

# (mean amplitude, [(mode amplitude, frequency), ...]); mean frequency is 1
INITIAL_DATA = {
    "example1": (32.0, [(24.0, 1), (16.0, 2), (8.0, 3), (4.0, 4)]),
    "example2": (4.0, [(16.0, 2), (4.0, 3), (2.0, 4)]),
}


def cosine_product(g: GridPair, k: int) -> np.ndarray:
    """``(1 - cos 2 pi k x1)(1 - cos 2 pi k x2)`` at the interior fine nodes."""
    x = g.node_coords[g.interior_nodes]
    return (1 - np.cos(2 * np.pi * k * x[:, 0])) * (1 - np.cos(2 * np.pi * k * x[:, 1]))


def initial_fields(g: GridPair, name: str, m: int) -> tuple[np.ndarray, np.ndarray]:
    amp, modes = INITIAL_DATA[name]
    if m > len(modes):
        raise ValueError(f"initial data {name!r} defines {len(modes)} modes, m = {m} requested")
    mean = amp * cosine_product(g, 1)
    U = np.column_stack([a * cosine_product(g, k) for a, k in modes[:m]])
    return mean, U


def build_model(cfg: ExperimentConfig, g: GridPair) -> CoefficientModel:
    md = cfg.media
    if md.mean == "high-contrast":
        abar = high_contrast_mean(g, md.n_channels, md.background, md.contrast, md.seed)
    elif md.mean == "constant":
        abar = np.full(g.n_cells, md.background)
    else:
        abar = raster_import(md.raster_path, g, md.raster_scale)
    specs = {"example1": EXAMPLE1_FLUCTUATIONS, "example2": EXAMPLE2_FLUCTUATIONS, "none": []}.get(md.fluctuations)
    if specs is None:
        specs = parse_custom(md.custom)
    fluct = [trig_field(g, *s) for s in specs]
    if not fluct:
        fluct = [np.zeros(g.n_cells) for _ in range(cfg.gpc.r)]
    return CoefficientModel(abar, fluct)


@dataclass
class Problem:
    cfg: ExperimentConfig
    grid: GridPair
    model: CoefficientModel
    gpc: GpcSpace
    fine: AssembledOperators
    mean0: np.ndarray
    modes0: np.ndarray

    @property
    def increment_limit(self):
        lim = self.cfg.dybo.increment_limit
        return "auto" if lim == "auto" else None if lim == "none" else float(lim)


def build_problem(cfg: ExperimentConfig) -> Problem:
    g = build_grids(cfg.grid.n_coarse, cfg.grid.n_fine_per_coarse)
    model = build_model(cfg, g)
    gpc = GpcSpace(cfg.gpc.r, cfg.gpc.p)
    fine = fine_operators(model, g, cfg.dybo.f)
    mean, modes = initial_fields(g, cfg.dybo.initial, cfg.dybo.m)
    return Problem(cfg, g, model, gpc, fine, mean, modes)


def offline_key(cfg: ExperimentConfig) -> str:
    d = cfg.as_dict()
    return config_hash({"grid": d["grid"], "media": d["media"], "l": cfg.online.l_per_node,
                        "version": CACHE_VERSION})


def save_offline(space: OfflineSpace, path, key: str = "") -> Path:
    """Versioned ``.npz`` cache: CSC arrays of R, per-node l, padded eigenvalues, owner map."""
    R = sp.csc_matrix(space.R)
    width = max(len(e) for e in space.eigenvalues)
    eig = np.full((len(space.eigenvalues), width), np.nan)
    for i, e in enumerate(space.eigenvalues):
        eig[i, :len(e)] = e
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, version=CACHE_VERSION, key=key, n_coarse=space.grid.n_coarse,
             n_fine_per_coarse=space.grid.n_fine_per_coarse, R_data=R.data, R_indices=R.indices,
             R_indptr=R.indptr, R_shape=np.array(R.shape), l=space.l, eigenvalues=eig, owner=space.owner)
    return path


def load_offline(path, g: GridPair, key: str | None = None) -> OfflineSpace:
    with np.load(path) as d:
        if int(d["version"]) != CACHE_VERSION:
            raise ValueError(f"{path}: cache version {int(d['version'])}, expected {CACHE_VERSION}")
        if key is not None and str(d["key"]) != key:
            raise ValueError(f"{path}: cache was built for a different grid/medium")
        if (int(d["n_coarse"]), int(d["n_fine_per_coarse"])) != (g.n_coarse, g.n_fine_per_coarse):
            raise ValueError(f"{path}: cache grid does not match")
        R = sp.csc_matrix((d["R_data"], d["R_indices"], d["R_indptr"]), shape=tuple(d["R_shape"]))
        eig = [row[~np.isnan(row)] for row in d["eigenvalues"]]
        return OfflineSpace(g, R, d["l"].copy(), eig, d["owner"].copy())


def offline_space(problem: Problem, cache_dir=None) -> OfflineSpace:
    cfg = problem.cfg
    if cache_dir:
        key = offline_key(cfg)
        path = Path(cache_dir) / f"offline-{key}.npz"
        if path.exists():
            logger.info("loading offline space from %s", path)
            return load_offline(path, problem.grid, key)
        space = build_offline_space(problem.grid, problem.model.abar, cfg.online.l_per_node)
        save_offline(space, path, key)
        return space
    return build_offline_space(problem.grid, problem.model.abar, cfg.online.l_per_node)


def kl_fields(state: DyboState, ops: AssembledOperators) -> tuple[np.ndarray, np.ndarray]:
    """Fine-grid mean and KL spatial modes of a state (recast on a copy)."""
    M = ops.M
    st = recast(state, M)
    return ops.prolong(st.u0), ops.prolong(st.U)


@dataclass
class Trajectory:
    """Fields at the report steps plus timing."""

    steps: list
    times: list
    mean: dict = field(default_factory=dict)  # step -> field
    modes: dict = field(default_factory=dict)
    start_mean: dict = field(default_factory=dict)
    start_modes: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    dim: dict = field(default_factory=dict)
    integrator: object = None


def report_steps(cfg: ExperimentConfig) -> list:
    return [int(round(t / cfg.dybo.dt)) for t in cfg.output.report_times]


def run_dybo(problem: Problem, space: OfflineSpace | None, online: bool, steps: list,
             snapshot_dir=None, snapshot_stride: int = 0, track_energy: bool = False) -> Trajectory:
    """Integrate to the last report step; ``space=None`` runs on the fine grid."""
    cfg = problem.cfg
    d, on = cfg.dybo, cfg.online
    fine, gpc = problem.fine, problem.gpc
    kw = dict(recast_stride=d.recast_stride, increment_limit=problem.increment_limit)
    if space is None:
        integ = DyboIntegrator(fine, gpc, d.dt, **kw)
        ops = fine
        state = init_state(problem.mean0, problem.modes0, ops, gpc, d.m)
    elif online:
        integ = OnlineDyboIntegrator(space, fine, gpc, d.dt, theta=on.theta, max_rounds=on.max_rounds,
                                     keep_bases=on.keep_bases, track_energy=track_energy,
                                     residual_source=on.residual_source, **kw)
        ops = fine
        pm, pU = integ.project(problem.mean0, problem.modes0)
        state = init_state(pm, pU, ops, gpc, d.m)
        if on.residual_source == "fine":
            integ.fine_state = init_state(problem.mean0, problem.modes0, fine, gpc, d.m)
    else:
        ops = assemble_operators(space, problem.model, problem.grid, fine=fine)
        integ = DyboIntegrator(ops, gpc, d.dt, **kw)
        state = init_state(problem.mean0, problem.modes0, ops, gpc, d.m)
    traj = Trajectory(list(steps), [s * d.dt for s in steps], integrator=integ)
    wanted = set(steps)
    last = max(steps) if steps else 0
    loop = 0.0
    for n in range(1, last + 1):
        t0 = time.perf_counter()
        state = integ.advance(state)
        loop += time.perf_counter() - t0
        if n in wanted:
            traj.mean[n], traj.modes[n] = kl_fields(state, ops)
            if isinstance(integ, OnlineDyboIntegrator):
                res = integ.results[-1]
                st = DyboState(res.start[:, 0], res.start[:, 1:], state.A, n, state.t)
                traj.start_mean[n], traj.start_modes[n] = kl_fields(st, ops)
                traj.dim[n] = (res.reports[0].norms.shape[0], res.dim)
        if snapshot_dir is not None and snapshot_stride and n % snapshot_stride == 0:
            st = recast(state, ops.M)
            np.savez(Path(snapshot_dir) / f"state_{n:06d}.npz", u0=st.u0, U=st.U, A=st.A,
                     lam=np.diag(st.U.T @ (ops.M @ st.U)), t=st.t, n=n)
    traj.timing = {"mean": integ.timing["mean"], "modes": integ.timing["modes"], "loop": loop}
    return traj


def gpc_reference(problem: Problem, steps: list) -> Trajectory:
    """Truncation-free reference: gPC-Galerkin trajectory, KL-extracted at the report steps."""
    cfg = problem.cfg
    fine, gpc = problem.fine, problem.gpc
    st = init_state(problem.mean0, problem.modes0, fine, gpc, cfg.dybo.m)
    block0 = np.column_stack([st.u0, st.U @ st.A.T])
    last = max(steps)
    t0 = time.perf_counter()
    traj_arr = gpc_galerkin_solve(problem.model, problem.grid, gpc, block0, cfg.dybo.f, cfg.dybo.dt, last, ops=fine)
    elapsed = time.perf_counter() - t0
    out = Trajectory(list(steps), [s * cfg.dybo.dt for s in steps])
    for n in steps:
        kl = kl_extract(traj_arr[n], fine.M, cfg.dybo.m)
        out.mean[n], out.modes[n] = kl.mean, kl.modes
    out.timing = {"mean": float("nan"), "modes": float("nan"), "loop": elapsed}
    return out


def error_rows(ref: Trajectory, run: Trajectory, M) -> list:
    """``(t, function, status, e2)`` rows; ``start`` rows only for online runs."""
    rows = []
    for n, t in zip(run.steps, run.times):
        statuses = [("start", run.start_mean, run.start_modes)] if run.start_mean else []
        statuses.append(("end", run.mean, run.modes))
        errs = {s: function_errors(ref.mean[n], ref.modes[n], mean[n], modes[n], M) for s, mean, modes in statuses}
        for fn in errs["end"]:
            for s, _, _ in statuses:
                rows.append((t, fn, s, errs[s][fn]))
    return rows


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])


def cpu_rows(fine: dict | None, proposed: dict) -> list:
    """Table-2 layout: rows mean / modes / total, columns fine-scale and proposed solver."""
    def col(tm, key):
        if tm is None:
            return float("nan")
        return tm["mean"] + tm["modes"] if key == "total" else tm[key]
    return [(key, col(fine, key), col(proposed, key)) for key in ("mean", "modes", "total")]


@dataclass
class RunSummary:
    directory: Path
    errors: list
    cpu: list
    problem_hash: str
    meta: dict


def run_experiment(cfg: ExperimentConfig, outdir=None) -> RunSummary:
    """Full protocol: offline stage, time loop, reference, CSV artifacts."""
    outdir = Path(outdir or cfg.output.directory)
    outdir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    steps = report_steps(cfg)
    snap_dir = None
    if cfg.output.snapshot_stride:
        snap_dir = outdir / "snapshots"
        snap_dir.mkdir(exist_ok=True)
    t0 = time.perf_counter()
    space = None if cfg.dybo.space == "fine" else offline_space(problem, cfg.output.cache_dir or None)
    t_offline = time.perf_counter() - t0
    run = run_dybo(problem, space, cfg.online.enabled and space is not None, steps, snap_dir,
                   cfg.output.snapshot_stride)
    ref, fine_timing = None, None
    if cfg.output.reference == "fine-dybo":
        ref = run if space is None else run_dybo(problem, None, False, steps)
        fine_timing = ref.timing
    elif cfg.output.reference == "gpc-galerkin":
        ref = gpc_reference(problem, steps)
    errors = error_rows(ref, run, problem.fine.M) if ref is not None else []
    cpu = cpu_rows(fine_timing, run.timing)
    write_csv(outdir / "errors.csv", ["t", "function", "status", "e2"], errors)
    write_csv(outdir / "cpu_times.csv", ["function", "fine_scale_s", "proposed_s"], cpu)
    integ = run.integrator
    if isinstance(integ, OnlineDyboIntegrator):
        write_csv(outdir / "enrichment.csv", ["n", "round", "selected", "sum_residual", "energy_error"],
                  integ.enrichment_rows())
    else:
        write_csv(outdir / "enrichment.csv", ["n", "round", "selected", "sum_residual", "energy_error"], [])
    fields = {"steps": np.array(steps), "times": np.array(run.times)}
    for n in steps:
        fields[f"mean_{n}"] = run.mean[n]
        fields[f"modes_{n}"] = run.modes[n]
    np.savez(outdir / "fields.npz", **fields)
    write_config(cfg, outdir / "config.ini")
    phash = config_hash(cfg.problem_dict())
    meta = {
        "version": __version__,
        "problem_hash": phash,
        "space": cfg.dybo.space,
        "online": bool(cfg.online.enabled and space is not None),
        "n_fine_dofs": problem.fine.n,
        "n_offline": None if space is None else int(space.n_d),
        "offline_seconds": t_offline,
        "cpu_mean": run.timing["mean"],
        "cpu_modes": run.timing["modes"],
        "cpu_total": run.timing["mean"] + run.timing["modes"],
        "n_frozen": int(sum(h.frozen for h in integ.history)),
        "n_steps": max(steps),
    }
    (outdir / "meta.json").write_text(json.dumps(meta, indent=2))
    logger.info("run written to %s", outdir)
    return RunSummary(outdir, errors, cpu, phash, meta)


def load_run(directory) -> tuple[dict, dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"{directory}: not a run directory (meta.json missing)")
    meta = json.loads(meta_path.read_text())
    with np.load(directory / "fields.npz") as d:
        fields = {k: d[k] for k in d.files}
    return meta, fields


class HashMismatch(ValueError):
    pass


def compare_runs(run_dir, ref_dir, M, out_dir=None) -> dict:
    """Errors of ``run_dir`` against ``ref_dir`` at common report steps, plus the speed-up."""
    meta_a, fa = load_run(run_dir)
    meta_b, fb = load_run(ref_dir)
    if meta_a["problem_hash"] != meta_b["problem_hash"]:
        raise HashMismatch(f"problem hashes differ: {meta_a['problem_hash']} vs {meta_b['problem_hash']}")
    common = sorted(set(fa["steps"].tolist()) & set(fb["steps"].tolist()))
    rows = []
    times = dict(zip(fb["steps"].tolist(), fb["times"].tolist()))
    for n in common:
        errs = function_errors(fb[f"mean_{n}"], fb[f"modes_{n}"], fa[f"mean_{n}"], fa[f"modes_{n}"], M)
        rows.extend((times[n], fn, e) for fn, e in errs.items())
    speedup = meta_b["cpu_total"] / meta_a["cpu_total"] if meta_a["cpu_total"] > 0 else float("inf")
    vals = np.array([r[2] for r in rows]) if rows else np.zeros(0)
    summary = {
        "max_error": float(vals.max()) if vals.size else 0.0,
        "mean_error": float(vals.mean()) if vals.size else 0.0,
        "speedup": float(speedup),
        "rows": rows,
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_csv(out_dir / "compare.csv", ["t", "function", "e2"], rows)
        (out_dir / "summary.txt").write_text(
            f"max relative L2 error: {100 * summary['max_error']:.4f}%\n"
            f"mean relative L2 error: {100 * summary['mean_error']:.4f}%\n"
            f"speed-up (reference CPU / run CPU): {summary['speedup']:.2f}x\n"
        )
    return summary
