"""Reference solvers and error metrics.

``gpc_galerkin_solve`` integrates the full stochastic Galerkin system on
the fine grid (no low-rank truncation); ``kl_extract`` turns a block of
gPC coefficients back into KL factors. The helpers at the end compare
approximations against references on the fine grid.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .dybo import AssembledOperators, DyboState, fine_operators
from .fem import SpdFactor
from .gpc import GpcSpace, extended_tensors
from .grid import GridPair
from .media import CoefficientModel

logger = logging.getLogger(__name__)

MAX_UNKNOWNS = 5_000_000


def galerkin_matrix(ops: AssembledOperators, gpc: GpcSpace, c: float) -> sp.csc_matrix:
    """Block operator ``I (x) (S0 + c M) + sum_i E[xi_i H H^T] (x) S_i`` over ``{1, H}``."""
    T = extended_tensors(gpc)
    n_blocks = gpc.n_p + 1
    A = sp.kron(sp.identity(n_blocks), sp.csr_matrix(ops.S0 + c * ops.M))
    for Ti, Si in zip(T, ops.S):
        A = A + sp.kron(sp.csr_matrix(Ti), sp.csr_matrix(Si))
    return sp.csc_matrix(A)


def gpc_galerkin_solve(model: CoefficientModel, g: GridPair, gpc: GpcSpace, initial: np.ndarray,
                       f, dt: float, n_steps: int, ops: AssembledOperators | None = None) -> np.ndarray:
    """Implicit-Euler trajectory of the stochastic Galerkin system.

    ``initial`` is the coefficient block ``(N_f, N_p + 1)`` (mean in column
    0). Returns an array of shape ``(n_steps + 1, N_f, N_p + 1)``.
    """
    if model.r != gpc.r:
        raise ValueError(f"model has r = {model.r} fluctuations, gPC space has r = {gpc.r}")
    ops = fine_operators(model, g, f) if ops is None else ops
    n_blocks = gpc.n_p + 1
    if ops.n * n_blocks > MAX_UNKNOWNS:
        raise MemoryError(f"{ops.n * n_blocks} unknowns exceed the oracle limit of {MAX_UNKNOWNS}")
    v = np.asarray(initial, dtype=float)
    if v.shape != (ops.n, n_blocks):
        raise ValueError(f"initial block has shape {v.shape}, expected {(ops.n, n_blocks)}")
    if dt <= 0 or n_steps < 0:
        raise ValueError("need dt > 0 and n_steps >= 0")
    c = 1.0 / dt
    fac = SpdFactor(galerkin_matrix(ops, gpc, c))
    out = np.empty((n_steps + 1, ops.n, n_blocks))
    out[0] = v
    for n in range(n_steps):
        rhs = c * (ops.M @ v)
        rhs[:, 0] += ops.f
        v = fac.solve(rhs.ravel(order="F")).reshape(ops.n, n_blocks, order="F")
        out[n + 1] = v
    return out


def state_to_block(state: DyboState, ops: AssembledOperators | None = None) -> np.ndarray:
    """gPC coefficient block ``[ubar, U A^T]`` on the fine grid."""
    u0, U = state.u0, state.U
    if ops is not None and not ops.is_fine:
        u0, U = ops.prolong(u0), ops.prolong(U)
    return np.column_stack([u0, U @ state.A.T])


@dataclass
class KLFactors:
    mean: np.ndarray
    modes: np.ndarray  # (N_f, m), M-orthogonal, decreasing norms
    A: np.ndarray  # (N_p, m), orthonormal columns
    lam: np.ndarray
    deficient: np.ndarray  # trailing modes beyond the numerical rank


def kl_extract(block: np.ndarray, M, m: int, rtol: float = 1e-12) -> KLFactors:
    """M-weighted SVD of the fluctuation part of a gPC block.

    Works on the small ``N_p x N_p`` side: eigenvectors of ``V^T M V`` give
    the stochastic coefficients, ``U = V A`` the spatial modes.
    """
    block = np.asarray(block, dtype=float)
    V = block[:, 1:]
    n_p = V.shape[1]
    if not 1 <= m <= n_p:
        raise ValueError(f"m = {m} must lie in [1, N_p = {n_p}]")
    C = V.T @ (M @ V)
    lam, A = np.linalg.eigh(0.5 * (C + C.T))
    order = np.argsort(lam)[::-1][:m]
    lam, A = np.maximum(lam[order], 0.0), A[:, order]
    U = V @ A
    idx = np.argmax(np.abs(U), axis=0)
    sgn = np.sign(U[idx, np.arange(m)])
    sgn[sgn == 0] = 1.0
    U, A = U * sgn, A * sgn
    deficient = lam <= rtol * max(lam[0], 0.0) if lam[0] > 0 else np.ones(m, dtype=bool)
    if np.any(deficient):
        logger.warning("kl_extract: modes %s exceed the numerical rank; zeroed", np.flatnonzero(deficient).tolist())
        U[:, deficient] = 0.0
    return KLFactors(block[:, 0].copy(), U, A, lam, deficient)


def l2_norm(v: np.ndarray, M) -> float:
    return float(np.sqrt(max(v @ (M @ v), 0.0)))


def error_l2(reference: np.ndarray, approx: np.ndarray, M) -> float:
    """Relative M-weighted error ``|ref - approx| / |ref|``."""
    reference = np.asarray(reference, dtype=float)
    approx = np.asarray(approx, dtype=float)
    if reference.shape != approx.shape:
        raise ValueError(f"shape mismatch {reference.shape} vs {approx.shape}")
    den = l2_norm(reference, M)
    if den == 0:
        raise ZeroDivisionError("reference field has zero L2 norm")
    return l2_norm(reference - approx, M) / den


def align_modes(reference: np.ndarray, approx: np.ndarray, M) -> np.ndarray:
    """Reorder and re-sign ``approx`` columns to match ``reference`` greedily.

    Pairs are taken in order of decreasing absolute normalized correlation;
    each matched column is flipped so the correlation is positive.
    """
    ref = np.atleast_2d(reference.T).T
    app = np.atleast_2d(approx.T).T
    k = ref.shape[1]
    if app.shape[1] < k:
        raise ValueError("approximation has fewer modes than the reference")
    G = ref.T @ (M @ app)
    nr = np.sqrt(np.maximum(np.einsum("ij,ij->j", ref, M @ ref), 0.0))
    na = np.sqrt(np.maximum(np.einsum("ij,ij->j", app, M @ app), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = np.nan_to_num(G / np.outer(nr, na))
    out = np.zeros_like(ref)
    free_r, free_a = set(range(k)), set(range(app.shape[1]))
    for _ in range(k):
        best = max(((abs(corr[i, j]), -i, -j) for i in free_r for j in free_a))
        i, j = -best[1], -best[2]
        out[:, i] = app[:, j] * (1.0 if corr[i, j] >= 0 else -1.0)
        free_r.discard(i)
        free_a.discard(j)
    return out


def variance(modes: np.ndarray) -> np.ndarray:
    """Pointwise ``sum_i u_i^2`` of the spatial modes (the variance for orthonormal Y)."""
    return np.sum(np.asarray(modes) ** 2, axis=1)


def function_errors(ref_mean, ref_modes, mean, modes, M) -> dict:
    """Relative L2 errors of the mean, each aligned mode and the variance."""
    aligned = align_modes(ref_modes, modes, M)
    out = {"ubar": error_l2(ref_mean, mean, M)}
    for k in range(ref_modes.shape[1]):
        out[f"u{k + 1}"] = error_l2(ref_modes[:, k], aligned[:, k], M)
    out["var"] = error_l2(variance(ref_modes), variance(modes), M)
    return out


def config_hash(payload) -> str:
    """Stable content hash of a JSON-serializable configuration."""
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def cached_trajectory(cache_dir, payload, compute):
    """Load ``compute()``'s dict of arrays from ``cache_dir`` keyed by ``payload``, computing on a miss."""
    cache_dir = Path(cache_dir)
    path = cache_dir / f"reference-{config_hash(payload)}.npz"
    if path.exists():
        with np.load(path) as data:
            return {k: data[k] for k in data.files}
    result = compute()
    cache_dir.mkdir(parents=True, exist_ok=True)
    np.savez(path, **result)
    return result
