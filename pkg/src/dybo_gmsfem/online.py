"""Online residual-driven enrichment of the multiscale space.

Everything here works with fine-grid vectors over the interior fine dofs.
The local space ``V_i`` of a neighborhood is the set of fine Q1 functions
supported in ``D_i`` (interior fine dofs of ``D_i``); local residuals are
measured in the dual of ``V_i`` with the energy inner product of ``abar``.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .dybo import (
    AssembledOperators, DyboIntegrator, DyboState, _check_finite, recast,
)
from .fem import SpdFactor
from .gpc import GpcSpace
from .grid import GridPair, neighborhood
from .msbasis import OfflineSpace

logger = logging.getLogger(__name__)

DEPENDENCE_TOL = 1e-10


@dataclass
class ResidualReport:
    """Residual norms of one enrichment level.

    ``norms[i, k]`` is the dual norm of the local residual of equation ``k``
    (mean first, then the spatial modes) on neighborhood ``i``.
    """

    level: int
    norms: np.ndarray
    weights: np.ndarray
    selected: list = field(default_factory=list)
    n_added: int = 0
    energy_error: np.ndarray | None = None

    @property
    def totals(self) -> np.ndarray:
        return self.norms.sum(axis=0)


class OnlineContext:
    """Local energy matrices of all neighborhoods, factorized once.

    The block-diagonal matrix of the local stiffness blocks is factorized as
    a whole, so one solve yields the Riesz representatives on every
    neighborhood simultaneously.
    """

    def __init__(self, space: OfflineSpace, fine: AssembledOperators):
        g = space.grid
        self.grid = g
        self.n_fine = fine.n
        dof = g.dof_of_node
        self.blocks = []
        for i in range(g.n_interior_coarse):
            d = dof[neighborhood(g, i).interior_nodes]
            self.blocks.append(np.sort(d[d >= 0]))
        self.gather = np.concatenate(self.blocks)
        self.offsets = np.cumsum([0] + [len(b) for b in self.blocks])[:-1]
        K = sp.csr_matrix(fine.S0)
        self._local = [K[b][:, b].tocsc() for b in self.blocks]
        self.factor = SpdFactor(sp.block_diag(self._local, format="csc"))
        self.weights = 1.0 / space.lambda_next()

    @property
    def n_neighborhoods(self) -> int:
        return len(self.blocks)

    def residual_norms(self, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Dual norms of ``r`` (fine duals, one column per equation) on every ``V_i``.

        Returns the norms ``(N_in, k)`` and the stacked local representatives.
        """
        r = r.reshape(self.n_fine, -1)
        rg = r[self.gather]
        phi = self.factor.solve(rg)
        sq = np.add.reduceat(rg * phi, self.offsets, axis=0)
        return np.sqrt(np.maximum(sq, 0.0)), phi

    def representative(self, phi_all: np.ndarray, i: int) -> np.ndarray:
        start = self.offsets[i]
        return phi_all[start:start + len(self.blocks[i])]


def local_residual(ctx: OnlineContext, i: int, u_off: np.ndarray, rhs: np.ndarray,
                   fine: AssembledOperators, c: float) -> np.ndarray:
    """``R_i(v) = <rhs, v> - A(u_off, v) - c <u_off, v>`` for ``v`` in ``V_i``.

    ``rhs`` holds the fine duals of ``c u_prev + G``; the returned vector
    lists the functional's values on the fine hat functions of ``V_i``.
    """
    u_off = np.asarray(u_off, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    if u_off.shape != rhs.shape or u_off.shape[0] != fine.n:
        raise ValueError(f"inconsistent shapes: u_off {u_off.shape}, rhs {rhs.shape}, fine dofs {fine.n}")
    b = ctx.blocks[i]
    return rhs[b] - fine.S0[b] @ u_off - c * (fine.M[b] @ u_off)


def online_basis(ctx: OnlineContext, i: int, r_i: np.ndarray) -> tuple[np.ndarray, float]:
    """Riesz representative ``phi`` of ``R_i`` (``A(phi, v) = R_i(v)``) and ``|R_i|^2``.

    ``phi`` is returned as a full fine dof vector (zero outside ``D_i``).
    """
    r_i = np.asarray(r_i, dtype=float)
    if r_i.shape[0] != len(ctx.blocks[i]):
        raise ValueError(f"residual has {r_i.shape[0]} entries, V_{i} has {len(ctx.blocks[i])} dofs")
    loc = SpdFactor(ctx._local[i]).solve(r_i)
    phi = np.zeros((ctx.n_fine,) + r_i.shape[1:])
    phi[ctx.blocks[i]] = loc
    return phi, float(np.sum(r_i * loc))


def select_neighborhoods(scores: np.ndarray, g: GridPair, eligible=None) -> list:
    """Greedy pick of pairwise non-overlapping neighborhoods by decreasing score.

    Ties go to the lower index (stable sort); zero scores are never picked.
    """
    scores = np.asarray(scores, dtype=float)
    order = np.argsort(-scores, kind="stable")
    chosen = []
    for i in order:
        if scores[i] <= 0 or (eligible is not None and not eligible[i]):
            continue
        if all(not g.overlaps(int(i), j) for j in chosen):
            chosen.append(int(i))
    return chosen


class GalerkinSpace:
    """Growing Galerkin space for the step operator ``S0 + c M`` on the fine grid."""

    def __init__(self, R, fine: AssembledOperators, c: float):
        self.fine = fine
        self.c = c
        self.op = (fine.S0 + c * fine.M).tocsr()
        self.R = sp.csc_matrix(R)
        K = self.R.T @ (self.op @ self.R)
        K = K.toarray() if sp.issparse(K) else np.asarray(K)
        self.K = 0.5 * (K + K.T)
        self._cho = None

    @property
    def dim(self) -> int:
        return self.R.shape[1]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        """Galerkin solution, prolonged to the fine dofs."""
        if self._cho is None:
            self._cho = sla.cho_factor(self.K, lower=True)
        coef = sla.cho_solve(self._cho, np.asarray(self.R.T @ rhs))
        return self.R @ coef

    def extend(self, cols: np.ndarray, tol: float = DEPENDENCE_TOL) -> int:
        """Append candidate columns, dropping numerically dependent ones.

        Dependence is judged on the Schur complement of the new block in the
        energy Gram matrix (pivoted Cholesky, relative pivot ``tol``).
        """
        cols = sp.csc_matrix(cols) if sp.issparse(cols) else sp.csc_matrix(
            np.asarray(cols, dtype=float).reshape(self.R.shape[0], -1))
        if cols.shape[1] == 0:
            return 0
        if self._cho is None:
            self._cho = sla.cho_factor(self.K, lower=True)
        Acols = self.op @ cols
        Kon = (self.R.T @ Acols).toarray()
        Knn = (cols.T @ Acols).toarray()
        Knn = 0.5 * (Knn + Knn.T)
        S = Knn - Kon.T @ sla.cho_solve(self._cho, Kon)
        keep = []
        S = S.copy()
        diag0 = np.diag(Knn).copy()
        # greedy pivoted elimination in candidate order
        for j in range(S.shape[0]):
            piv = S[j, j]
            if piv <= tol * max(diag0[j], np.finfo(float).tiny):
                logger.debug("online basis candidate %d dropped (relative pivot %.2e)", j, piv / max(diag0[j], 1e-300))
                continue
            keep.append(j)
            v = S[:, j] / np.sqrt(piv)
            S = S - np.outer(v, v)
        if not keep:
            return 0
        n_old = self.dim
        K = np.empty((n_old + len(keep),) * 2)
        K[:n_old, :n_old] = self.K
        K[:n_old, n_old:] = Kon[:, keep]
        K[n_old:, :n_old] = Kon[:, keep].T
        K[n_old:, n_old:] = Knn[np.ix_(keep, keep)]
        self.K = K
        self.R = sp.hstack([self.R, cols[:, keep]], format="csc")
        self._cho = None
        return len(keep)


def energy_errors(u: np.ndarray, u_ref: np.ndarray, op) -> np.ndarray:
    """Per-column energy norm ``sqrt(e^T op e)`` of ``u - u_ref``."""
    e = np.asarray(u - u_ref).reshape(u.shape[0], -1)
    return np.sqrt(np.maximum(np.sum(e * (op @ e), axis=0), 0.0))


@dataclass
class EnrichmentResult:
    start: np.ndarray
    solution: np.ndarray
    reports: list
    converged: bool
    dim: int
    diagnostics: list = field(default_factory=list)


def enrich(space: GalerkinSpace, ctx: OnlineContext, rhs: np.ndarray, theta: float = 0.05,
           max_rounds: int = 5, fine_solution: np.ndarray | None = None) -> EnrichmentResult:
    """Residual-driven enrichment rounds on a shared space for several equations.

    ``rhs`` holds one fine dual vector per equation (columns). Each round
    ranks neighborhoods by their residual norms (normalized per equation so
    that equations of very different magnitude count alike), selects a
    non-overlapping set, adds one online basis per equation on each selected
    neighborhood and re-solves. Stops once every equation's total residual
    is at most ``theta`` times its initial total, or after ``max_rounds``.

    With ``fine_solution`` (the fine solve of the same system) the energy
    error of every level is recorded.
    """
    if not 0 < theta:
        raise ValueError("theta must be positive")
    if max_rounds < 0:
        raise ValueError("max_rounds must be non-negative")
    rhs = np.asarray(rhs, dtype=float).reshape(ctx.n_fine, -1)
    u = space.solve(rhs)
    start = u.copy()
    reports, notes = [], []
    initial = None
    converged = False
    for level in range(max_rounds + 1):
        r = rhs - space.op @ u
        norms, phi_all = ctx.residual_norms(r)
        rep = ResidualReport(level, norms, ctx.weights)
        if fine_solution is not None:
            rep.energy_error = energy_errors(u, fine_solution, space.op)
        reports.append(rep)
        totals = rep.totals
        if initial is None:
            initial = totals.copy()
        active = initial > 0
        rel = np.where(active, totals / np.where(active, initial, 1.0), 0.0)
        if level > 0:
            prev = reports[-2].totals
            worse = active & (totals >= prev)
            if np.any(worse):
                msg = (f"residual did not decrease in round {level} for equation(s) "
                       f"{np.flatnonzero(worse).tolist()}; offline space may be too small")
                logger.warning(msg)
                notes.append(msg)
        if np.all(rel <= theta):
            converged = True
            break
        if level == max_rounds:
            break
        scale = np.where(active, initial, 1.0)
        scores = (norms / scale[None, :])[:, active].sum(axis=1)
        chosen = select_neighborhoods(scores, ctx.grid)
        rows, vals, idx = [], [], []
        for i in chosen:
            loc = ctx.representative(phi_all, i)
            for k in np.flatnonzero(norms[i] > 0):
                rows.append(ctx.blocks[i])
                vals.append(loc[:, k])
                idx.append(np.full(len(ctx.blocks[i]), len(idx)))
        rep.selected = chosen
        rep.n_added = 0
        if idx:
            cols = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(idx))),
                                 shape=(ctx.n_fine, len(idx)))
            rep.n_added = space.extend(cols)
        if rep.n_added == 0:
            notes.append(f"round {level}: no independent online basis functions; stopping")
            logger.warning(notes[-1])
            break
        u = space.solve(rhs)
    return EnrichmentResult(start, u, reports, converged, space.dim, notes)


class OnlineDyboIntegrator(DyboIntegrator):
    """DyBO time loop on the offline space with per-step online enrichment.

    The state is carried in fine coordinates (prolonged Galerkin solutions),
    so right-hand sides are formed with the fine operators and projected
    onto whatever space the current step uses. By default every step starts
    again from the offline space; ``keep_bases=True`` carries the enriched
    space over to the next step instead.

    ``residual_source="fine"`` builds each step's right-hand side from a
    fine-space DyBO state advanced alongside (verification mode); the
    default uses the multiscale state itself.
    """

    def __init__(self, space: OfflineSpace, fine: AssembledOperators, gpc: GpcSpace, dt: float,
                 theta: float = 0.05, max_rounds: int = 5, keep_bases: bool = False,
                 track_energy: bool = False, residual_source: str = "coarse", **kw):
        super().__init__(fine, gpc, dt, **kw)
        if residual_source not in ("coarse", "fine"):
            raise ValueError(f"residual_source must be 'coarse' or 'fine', got {residual_source!r}")
        self.space = space
        self.theta, self.max_rounds = theta, max_rounds
        self.keep_bases = keep_bases
        self.track_energy = track_energy or residual_source == "fine"
        self.residual_source = residual_source
        self.ctx = OnlineContext(space, fine)
        self._galerkin = None
        self.results: list[EnrichmentResult] = []
        self.fine_state: DyboState | None = None

    def _space(self) -> GalerkinSpace:
        if self._galerkin is None or not self.keep_bases:
            self._galerkin = GalerkinSpace(self.space.R, self.ops, 1.0 / self.dt)
        return self._galerkin

    def project(self, mean: np.ndarray, modes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """M-weighted projection of fine fields onto the offline space, prolonged."""
        R = self.space.R
        G = np.asarray((R.T @ (self.ops.M @ R)).toarray())
        cho = sla.cho_factor(0.5 * (G + G.T), lower=True)
        proj = lambda v: R @ sla.cho_solve(cho, np.asarray(R.T @ (self.ops.M @ v)))
        return proj(mean), proj(modes)

    def advance(self, state: DyboState) -> DyboState:
        t0 = time.perf_counter()
        fine_sol = None
        if self.residual_source == "fine":
            if self.fine_state is None:
                raise RuntimeError("verification mode needs fine_state to be initialised")
            plan = self.plan(self.fine_state)
        else:
            plan = self.plan(state)
        rhs = np.column_stack([plan.b0, plan.B])
        tf = time.perf_counter()
        if self.track_energy:
            fine_sol = self.ops.system(1.0 / self.dt).solve(rhs)
        if self.residual_source == "fine":
            fs = DyboState(fine_sol[:, 0], fine_sol[:, 1:], plan.A, self.fine_state.n + 1,
                           self.fine_state.t + self.dt)
            if plan.frozen or (self.recast_stride and fs.n % self.recast_stride == 0):
                fs = recast(fs, self.ops.M)
            self.fine_state = fs
        t1 = time.perf_counter()
        t0 += t1 - tf  # verification solves are not part of the method's cost
        res = enrich(self._space(), self.ctx, rhs, self.theta, self.max_rounds, fine_sol)
        t2 = time.perf_counter()
        self.results.append(res)
        # the enrichment loop is shared by all equations; split it evenly
        share = (t2 - t1) / rhs.shape[1]
        self.timing["mean"] += share
        self.timing["modes"] += (t1 - t0) + share * (rhs.shape[1] - 1)
        new = DyboState(res.solution[:, 0], res.solution[:, 1:], plan.A, state.n + 1, state.t + self.dt)
        _check_finite(new, "online step")
        return self.finish(new, plan.frozen)

    def enrichment_rows(self):
        """Rows ``(n, round, selected, sum_residual, energy_error)`` for the history CSV."""
        rows = []
        for n, res in enumerate(self.results, start=1):
            for rep in res.reports:
                err = "" if rep.energy_error is None else float(np.sqrt(np.sum(rep.energy_error**2)))
                rows.append((n, rep.level, " ".join(map(str, rep.selected)), float(rep.totals.sum()), err))
        return rows
