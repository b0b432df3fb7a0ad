"""Dynamically bi-orthogonal evolution of the truncated KL factors.

The solution is carried as ``u = ubar + U A^T H^T`` with the spatial parts
expanded in a Galerkin space (coarse multiscale space or the fine space
itself): ``ubar = R u0`` and ``U = R Uh``. Each step performs implicit Euler
solves for the mean and the spatial modes and an explicit update of the
stochastic coefficient matrix ``A``, with the C/D coupling matrices
recomputed from the previous state.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .fem import SpdFactor, assemble_load, assemble_mass, assemble_stiffness
from .gpc import GpcSpace
from .grid import GridPair
from .media import CoefficientModel

logger = logging.getLogger(__name__)

LAMBDA_FLOOR = 1e-12
SEPARATION = 1e-6


class DegenerateModeError(ArithmeticError):
    pass


class NumericalFailure(ArithmeticError):
    """Non-finite values or a failed solve inside the time loop."""

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


@dataclass
class DyboState:
    u0: np.ndarray
    U: np.ndarray
    A: np.ndarray
    n: int = 0
    t: float = 0.0

    @property
    def m(self) -> int:
        return self.U.shape[1]

    def copy(self) -> "DyboState":
        return DyboState(self.u0.copy(), self.U.copy(), self.A.copy(), self.n, self.t)


@dataclass
class AssembledOperators:
    """Galerkin operators on a space spanned by the columns of ``R``.

    ``R is None`` means the fine space itself (sparse matrices); otherwise
    the matrices are dense projections and ``fine`` holds the fine operators.
    """

    M: object
    S0: object
    S: list
    f: np.ndarray
    R: object = None
    fine: "AssembledOperators | None" = None
    grid: GridPair | None = None
    _factors: dict = field(default_factory=dict, repr=False)

    @property
    def n(self) -> int:
        return self.M.shape[0]

    @property
    def r(self) -> int:
        return len(self.S)

    @property
    def is_fine(self) -> bool:
        return self.R is None

    def system(self, c: float) -> SpdFactor:
        """Cached factorization of ``S0 + c M``."""
        fac = self._factors.get(c)
        if fac is None:
            fac = SpdFactor(self.S0 + c * self.M)
            self._factors[c] = fac
        return fac

    def prolong(self, x: np.ndarray) -> np.ndarray:
        return x if self.R is None else self.R @ x

    def mass_factor(self) -> SpdFactor:
        fac = self._factors.get("M")
        if fac is None:
            fac = SpdFactor(self.M)
            self._factors["M"] = fac
        return fac


@dataclass
class CDPair:
    C: np.ndarray
    D: np.ndarray
    frozen: bool = False


@dataclass
class ModeNorms:
    values: np.ndarray
    drift: float
    degenerate: np.ndarray

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.values)


def fine_operators(model: CoefficientModel, g: GridPair, f=1.0) -> AssembledOperators:
    """Fine-grid mass, stiffness (mean and fluctuations) and load, Dirichlet dofs removed."""
    bnd = g.boundary_nodes
    M = assemble_mass(g, dirichlet=bnd).matrix
    S0 = assemble_stiffness(model.abar, g, dirichlet=bnd).matrix
    S = [assemble_stiffness(a, g, dirichlet=bnd).matrix for a in model.fluct]
    return AssembledOperators(M, S0, S, assemble_load(f, g, dirichlet=bnd), grid=g)


def project_operators(fine: AssembledOperators, R) -> AssembledOperators:
    """Galerkin projection ``R^T X R`` of the fine operators (dense result)."""

    def proj(X):
        Y = R.T @ (X @ R)
        Y = Y.toarray() if sp.issparse(Y) else np.asarray(Y)
        return 0.5 * (Y + Y.T)

    f = R.T @ fine.f
    return AssembledOperators(
        proj(fine.M), proj(fine.S0), [proj(X) for X in fine.S], np.asarray(f).ravel(),
        R=R, fine=fine, grid=fine.grid,
    )


def assemble_operators(space, model: CoefficientModel, g: GridPair, f=1.0,
                       fine: AssembledOperators | None = None) -> AssembledOperators:
    """Operators on ``space`` (an OfflineSpace, a prolongation matrix, or None for the fine space)."""
    fine = fine_operators(model, g, f) if fine is None else fine
    if space is None:
        return fine
    R = getattr(space, "R", space)
    if R.shape[0] != fine.n:
        raise ValueError(f"space has {R.shape[0]} fine rows, grid has {fine.n} dofs")
    return project_operators(fine, R)


def lambda_matrix(U: np.ndarray, M, floor: float = LAMBDA_FLOOR) -> ModeNorms:
    """Squared L2 norms of the spatial modes and the relative bi-orthogonality drift."""
    W = U.T @ (M @ U)
    lam = np.diag(W).copy()
    m = len(lam)
    drift = 0.0
    if m > 1:
        scale = np.sqrt(np.outer(np.abs(lam), np.abs(lam)))
        off = np.abs(W - np.diag(lam))
        with np.errstate(divide="ignore", invalid="ignore"):
            rel = np.where(scale > 0, off / scale, np.where(off > 0, np.inf, 0.0))
        drift = float(rel.max())
    top = lam.max() if m else 0.0
    degenerate = lam <= floor * top if top > 0 else np.ones(m, dtype=bool)
    return ModeNorms(lam, drift, degenerate)


@dataclass
class Contractions:
    """Quantities shared by G*, the right-hand sides and the A update."""

    lam: ModeNorms
    W0: np.ndarray
    W: list
    z: list
    SU: list
    Su0: list


def contractions(state: DyboState, ops: AssembledOperators) -> Contractions:
    U, u0 = state.U, state.u0
    SU = [Si @ U for Si in ops.S]
    Su0 = [Si @ u0 for Si in ops.S]
    W0 = U.T @ (ops.S0 @ U)
    W = [U.T @ X for X in SU]
    z = [X.T @ u0 for X in SU]  # U^T S_i^T u0
    return Contractions(lambda_matrix(U, ops.M), W0, W, z, SU, Su0)


def compute_gstar(state: DyboState, ops: AssembledOperators, gpc: GpcSpace,
                  cx: Contractions | None = None) -> np.ndarray:
    """Coupling matrix ``G* = Lambda^-1 <U^T, E[L~u H]> A`` in discrete form."""
    cx = contractions(state, ops) if cx is None else cx
    lam = cx.lam.values
    if np.any(~np.isfinite(lam)) or np.any(lam <= 0):
        raise DegenerateModeError(f"mode norms not positive: {lam}")
    A = state.A
    inner = cx.W0 @ (A.T @ A)
    for i in range(ops.r):
        inner = inner + np.outer(cx.z[i], gpc.T0[i] @ A) + cx.W[i].T @ (A.T @ gpc.T1[i] @ A)
    return -inner / lam[:, None]


def solve_cd(gstar: np.ndarray, lam, separation: float = SEPARATION) -> CDPair:
    """Solve ``C - L^-1 Q~(L C) = 0``, ``D = Q(D)``, ``D^T + C = G*`` entrywise.

    Off-diagonal: ``D_ij = -(L_i G_ij + L_j G_ji) / (L_i - L_j)`` and
    ``C = G* + D``; the diagonal of D vanishes so ``C_ii = G_ii``. Returns a
    frozen pair (``C = D = 0``) when two mode norms are closer than
    ``separation * max(L)``.
    """
    lam = np.asarray(lam, dtype=float)
    lam = np.diag(lam) if lam.ndim == 2 else lam
    G = np.asarray(gstar, dtype=float)
    m = len(lam)
    if G.shape != (m, m):
        raise ValueError(f"G* has shape {G.shape}, expected {(m, m)}")
    if m > 1:
        gap = np.abs(lam[:, None] - lam[None, :])
        np.fill_diagonal(gap, np.inf)
        if gap.min() < separation * np.max(np.abs(lam)):
            return CDPair(np.zeros((m, m)), np.zeros((m, m)), frozen=True)
    num = lam[:, None] * G + (lam[:, None] * G).T
    den = lam[:, None] - lam[None, :]
    np.fill_diagonal(den, 1.0)
    D = -num / den
    np.fill_diagonal(D, 0.0)
    D = 0.5 * (D - D.T)
    return CDPair(G + D, D)


def cd_residuals(cd: CDPair, gstar, lam) -> tuple[float, float, float]:
    """Max-norm residuals of the three C/D equations (substitution check)."""
    lam = np.asarray(lam, dtype=float)
    lam = np.diag(lam) if lam.ndim == 2 else lam
    L = np.diag(lam)
    LC = L @ cd.C
    qt = 0.5 * (LC - LC.T) + np.diag(np.diag(LC))
    r1 = cd.C - np.diag(1.0 / lam) @ qt
    r2 = cd.D - 0.5 * (cd.D - cd.D.T)
    r3 = cd.D.T + cd.C - gstar
    return tuple(float(np.max(np.abs(x))) if x.size else 0.0 for x in (r1, r2, r3))


@dataclass
class StepPlan:
    """Right-hand sides (duals in the operators' space) and the updated ``A``."""

    b0: np.ndarray
    B: np.ndarray
    A: np.ndarray
    cd: CDPair
    lam: ModeNorms
    increment: float = 0.0

    @property
    def frozen(self) -> bool:
        return self.cd.frozen


def plan_step(state: DyboState, ops: AssembledOperators, gpc: GpcSpace, dt: float,
              separation: float = SEPARATION, floor: float = LAMBDA_FLOOR,
              increment_limit: float | None = None) -> StepPlan:
    """Build ``G1``, ``G2`` and the explicit ``A`` update from the state at ``t_{n-1}``."""
    c = 1.0 / dt
    cx = contractions(state, ops)
    A = state.A
    m = state.m
    lam = cx.lam.values
    if np.any(lam <= floor * max(lam.max(), 0.0)) or np.any(lam <= 0):
        logger.debug("step %d: degenerate mode norms %s; freezing A", state.n, lam)
        cd = CDPair(np.zeros((m, m)), np.zeros((m, m)), frozen=True)
    else:
        cd = solve_cd(compute_gstar(state, ops, gpc, cx), lam, separation)
    A_new = A.copy()
    increment = 0.0
    if not cd.frozen:
        G3 = A @ cx.W0
        for i in range(ops.r):
            G3 = G3 + np.outer(gpc.T0[i], cx.z[i]) + gpc.T1[i] @ A @ cx.W[i]
        G3 = G3 / lam[None, :]
        dA = -dt * (A @ cd.C.T + G3)
        increment = float(np.max(np.linalg.norm(dA, axis=0)))
        if increment_limit is not None and increment > increment_limit:
            logger.debug("step %d: explicit A increment %.3g exceeds limit; freezing A", state.n, increment)
            cd = CDPair(np.zeros((m, m)), np.zeros((m, m)), frozen=True)
        else:
            A_new = A + dA

    MU = ops.M @ state.U
    b0 = c * (ops.M @ state.u0) + ops.f
    B = c * MU - MU @ cd.D.T
    for i in range(ops.r):
        b0 = b0 - cx.SU[i] @ (A.T @ gpc.T0[i])
        B = B - np.outer(cx.Su0[i], gpc.T0[i] @ A) - cx.SU[i] @ (A.T @ gpc.T1[i] @ A)
    return StepPlan(b0, B, A_new, cd, cx.lam, increment)


def _check_finite(state: DyboState, where: str) -> None:
    for name in ("u0", "U", "A"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise NumericalFailure(f"non-finite {name} after {where} at step {state.n}", state)


def step(state: DyboState, ops: AssembledOperators, gpc: GpcSpace, dt: float, **kw) -> DyboState:
    """Advance one implicit-Euler step on a fixed space."""
    plan = plan_step(state, ops, gpc, dt, **kw)
    fac = ops.system(1.0 / dt)
    sol = fac.solve(np.column_stack([plan.b0, plan.B]))
    new = DyboState(sol[:, 0], sol[:, 1:], plan.A, state.n + 1, state.t + dt)
    _check_finite(new, "step")
    return new


def orthonormality_drift(A: np.ndarray) -> float:
    m = A.shape[1]
    return float(np.max(np.abs(A.T @ A - np.eye(m)))) if m else 0.0


def recast(state: DyboState, M, floor: float = LAMBDA_FLOOR) -> DyboState:
    """Re-factor ``U A^T`` into bi-orthogonal form (M-orthogonal U, orthonormal A).

    Columns are sorted by decreasing norm; the sign makes each spatial
    mode's largest-magnitude coefficient positive.
    """
    Q, Rr = np.linalg.qr(state.A)
    Up = state.U @ Rr.T
    W = Up.T @ (M @ Up)
    s, P = np.linalg.eigh(0.5 * (W + W.T))
    order = np.argsort(s)[::-1]
    s, P = s[order], P[:, order]
    U_new = Up @ P
    A_new = Q @ P
    idx = np.argmax(np.abs(U_new), axis=0)
    sgn = np.sign(U_new[idx, np.arange(U_new.shape[1])])
    sgn[sgn == 0] = 1.0
    U_new = U_new * sgn
    A_new = A_new * sgn
    if len(s) and np.any(s <= floor * max(s[0], 0)):
        low = np.flatnonzero(s <= floor * max(s[0], 0))
        logger.warning("recast: rank collapse, modes %s below floor; zeroed", low.tolist())
        U_new[:, low] = 0.0
    return DyboState(state.u0.copy(), U_new, A_new, state.n, state.t)


def canonical_A(gpc: GpcSpace, m: int) -> np.ndarray:
    """Unit columns at the first ``m`` multi-indices (degree one first)."""
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > gpc.n_p:
        raise ValueError(f"m = {m} exceeds the gPC basis size N_p = {gpc.n_p}")
    return np.eye(gpc.n_p)[:, :m]


def project_fine(values: np.ndarray, ops: AssembledOperators) -> np.ndarray:
    """M-weighted L2 projection of fine dof vectors onto the operators' space."""
    if ops.is_fine:
        return np.array(values, dtype=float)
    b = ops.R.T @ (ops.fine.M @ values)
    return ops.mass_factor().solve(np.asarray(b))


def init_state(mean: np.ndarray, modes: np.ndarray, ops: AssembledOperators, gpc: GpcSpace,
               m: int | None = None, A0: np.ndarray | None = None) -> DyboState:
    """Project initial fields (fine dof vectors) and recast into bi-orthogonal form."""
    modes = np.atleast_2d(np.asarray(modes, dtype=float))
    if modes.shape[0] != len(mean):
        modes = modes.T
    m = modes.shape[1] if m is None else m
    if m != modes.shape[1]:
        raise ValueError(f"got {modes.shape[1]} initial modes for m = {m}")
    A = canonical_A(gpc, m) if A0 is None else np.asarray(A0, dtype=float)
    u0 = project_fine(mean, ops)
    U = project_fine(modes, ops)
    if U.ndim == 1:
        U = U[:, None]
    return recast(DyboState(u0, U, A), ops.M)


@dataclass
class StepRecord:
    """Diagnostics of one step.

    ``raw_*`` drifts are measured on the freshly stepped factors, before any
    recast; ``orth_drift``/``biorth_drift`` on the state handed to the next step.
    """

    n: int
    t: float
    frozen: bool
    recast: bool
    raw_orth_drift: float
    raw_biorth_drift: float
    orth_drift: float
    biorth_drift: float
    lam: np.ndarray


DRIFT_TOL = 1e-6


def default_increment_limit(recast_stride: int, drift_tol: float = DRIFT_TOL) -> float:
    """Largest explicit ``A`` increment compatible with the drift budget.

    One explicit step perturbs ``A^T A`` by roughly ``|dA|^2``; over a recast
    window of ``recast_stride`` steps the drift stays below ``drift_tol`` if
    every increment is below ``sqrt(drift_tol / recast_stride)``.
    """
    return float(np.sqrt(drift_tol / max(int(recast_stride or 1), 1)))


class DyboIntegrator:
    """Time loop with scheduled recasts and freeze handling on a fixed space.

    ``increment_limit`` bounds the column norm of the explicit ``A`` update;
    larger updates are treated like a separation failure (``A`` frozen for
    the step, recast afterwards). ``"auto"`` derives the bound from the
    recast stride, ``None`` disables the guard.
    """

    def __init__(self, ops: AssembledOperators, gpc: GpcSpace, dt: float, recast_stride: int = 20,
                 separation: float = SEPARATION, increment_limit="auto"):
        if dt <= 0:
            raise ValueError("dt must be positive")
        if recast_stride is not None and recast_stride < 0:
            raise ValueError("recast_stride must be non-negative")
        self.ops, self.gpc, self.dt = ops, gpc, dt
        self.recast_stride = recast_stride
        self.separation = separation
        if isinstance(increment_limit, str):
            if increment_limit != "auto":
                raise ValueError(f"increment_limit must be a number, None or 'auto', got {increment_limit!r}")
            increment_limit = default_increment_limit(recast_stride)
        self.increment_limit = increment_limit
        self.history: list[StepRecord] = []
        self.timing = {"mean": 0.0, "modes": 0.0}

    def plan(self, state: DyboState, ops: AssembledOperators | None = None) -> StepPlan:
        return plan_step(state, self.ops if ops is None else ops, self.gpc, self.dt,
                         separation=self.separation, increment_limit=self.increment_limit)

    def advance(self, state: DyboState) -> DyboState:
        t0 = time.perf_counter()
        plan = self.plan(state)
        fac = self.ops.system(1.0 / self.dt)
        t1 = time.perf_counter()
        u0 = fac.solve(plan.b0)
        t2 = time.perf_counter()
        U = fac.solve(plan.B)
        t3 = time.perf_counter()
        # the right-hand sides and the C/D/A work serve the mode equations
        self.timing["mean"] += t2 - t1
        self.timing["modes"] += (t1 - t0) + (t3 - t2)
        new = DyboState(u0, U.reshape(len(u0), -1), plan.A, state.n + 1, state.t + self.dt)
        _check_finite(new, "step")
        return self.finish(new, plan.frozen)

    def finish(self, new: DyboState, frozen: bool, M=None) -> DyboState:
        """Record drifts and recast on freeze or on the stride."""
        M = self.ops.M if M is None else M
        raw_orth = orthonormality_drift(new.A)
        raw_bi = lambda_matrix(new.U, M).drift
        do_recast = bool(frozen or (self.recast_stride and new.n % self.recast_stride == 0))
        if do_recast:
            new = recast(new, M)
            norms = lambda_matrix(new.U, M)
            orth, bi = orthonormality_drift(new.A), norms.drift
        else:
            norms = lambda_matrix(new.U, M)
            orth, bi = raw_orth, raw_bi
        self.history.append(StepRecord(new.n, new.t, frozen, do_recast, raw_orth, raw_bi, orth, bi,
                                       norms.values))
        return new

    def run(self, state: DyboState, n_steps: int, callback=None) -> DyboState:
        for _ in range(n_steps):
            state = self.advance(state)
            if callback is not None:
                callback(state)
        return state
