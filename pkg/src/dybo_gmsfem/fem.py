"""Q1 finite elements on the fine grid, SPD solves and small dense eigensolves."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .grid import GridPair

# Q1 element matrices on a square cell, nodes counter-clockwise from lower-left.
# The stiffness is scale invariant in 2D; the mass scales with h^2.
Q1_STIFFNESS = np.array([
    [4.0, -1.0, -2.0, -1.0],
    [-1.0, 4.0, -1.0, -2.0],
    [-2.0, -1.0, 4.0, -1.0],
    [-1.0, -2.0, -1.0, 4.0],
]) / 6.0
Q1_MASS = np.array([
    [4.0, 2.0, 1.0, 2.0],
    [2.0, 4.0, 2.0, 1.0],
    [1.0, 2.0, 4.0, 2.0],
    [2.0, 1.0, 2.0, 4.0],
]) / 36.0


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass
class SparseOperator:
    """Assembled matrix together with the fine node ids of its rows/columns."""

    matrix: sp.csr_matrix
    dofs: np.ndarray
    symmetric: bool = True

    @property
    def shape(self):
        return self.matrix.shape

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()


def as_cell_field(values, g: GridPair, name: str = "field") -> np.ndarray:
    """Return ``values`` as a flat per-fine-cell array, checking size and finiteness."""
    a = np.asarray(values, dtype=float)
    if a.ndim == 0:
        a = np.full(g.n_cells, float(a))
    a = a.ravel()
    if a.size != g.n_cells:
        raise ValueError(f"{name} has {a.size} values, grid has {g.n_cells} fine cells")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


def _select_cells(g: GridPair, cells) -> np.ndarray:
    if cells is None:
        return np.arange(g.n_cells)
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        raise ValueError("empty subdomain")
    return cells


def _assemble(elem: np.ndarray, weights: np.ndarray, g: GridPair, cells, dirichlet) -> SparseOperator:
    conn = g.cell_nodes[cells]
    nodes = np.unique(conn)
    if dirichlet is not None:
        nodes = np.setdiff1d(nodes, np.asarray(dirichlet, dtype=np.int64), assume_unique=False)
    local = np.full(g.n_nodes, -1, dtype=np.int64)
    local[nodes] = np.arange(len(nodes))
    lc = local[conn]
    rows = np.repeat(lc, 4, axis=1).ravel()
    cols = np.tile(lc, (1, 4)).ravel()
    vals = (weights[:, None, None] * elem[None, :, :]).reshape(len(cells), 16).ravel()
    keep = (rows >= 0) & (cols >= 0)
    n = len(nodes)
    mat = sp.coo_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n)).tocsr()
    mat.sum_duplicates()
    return SparseOperator(mat, nodes)


def assemble_stiffness(field, g: GridPair, cells=None, dirichlet=None) -> SparseOperator:
    """Q1 stiffness ``int a grad u . grad v`` with ``a`` constant per fine cell.

    ``cells`` restricts assembly to a subdomain; nodes in ``dirichlet`` are
    removed from rows and columns.
    """
    a = as_cell_field(field, g)
    cells = _select_cells(g, cells)
    return _assemble(Q1_STIFFNESS, a[cells], g, cells, dirichlet)


def assemble_mass(g: GridPair, cells=None, dirichlet=None, weight=None) -> SparseOperator:
    """Q1 consistent mass matrix, optionally with a per-cell weight."""
    cells = _select_cells(g, cells)
    w = np.ones(len(cells)) if weight is None else as_cell_field(weight, g, "weight")[cells]
    return _assemble(Q1_MASS * g.h**2, w, g, cells, dirichlet)


def assemble_load(values, g: GridPair, dirichlet=None) -> np.ndarray:
    """Load vector ``int f v`` for a nodal Q1 function ``f`` (scalar allowed)."""
    M = assemble_mass(g, dirichlet=None).matrix
    f = np.broadcast_to(np.asarray(values, dtype=float), (g.n_nodes,))
    b = M @ f
    if dirichlet is None:
        return b
    keep = np.setdiff1d(np.arange(g.n_nodes), dirichlet)
    return b[keep]


def _check_symmetric(A, what: str, rtol: float = 1e-10) -> None:
    if sp.issparse(A):
        diff = abs(A - A.T).max() if A.nnz else 0.0
        scale = abs(A).max() if A.nnz else 0.0
    else:
        diff = np.max(np.abs(A - A.T)) if A.size else 0.0
        scale = np.max(np.abs(A)) if A.size else 0.0
    if diff > rtol * max(scale, np.finfo(float).tiny):
        raise ValueError(f"{what} is not symmetric (max asymmetry {diff:.3e})")


class SpdFactor:
    """Reusable factorization of a symmetric positive definite matrix.

    Dense input uses Cholesky; sparse input uses SuperLU with symmetric
    pivoting so the pivots are those of an LDL^T factorization and can be
    checked for positivity.
    """

    def __init__(self, A):
        if isinstance(A, SparseOperator):
            A = A.matrix
        if A.shape[0] != A.shape[1]:
            raise ValueError("operator must be square")
        self.n = A.shape[0]
        self.sparse = sp.issparse(A)
        if self.n == 0:
            return
        if self.sparse:
            A = sp.csc_matrix(A)
            try:
                self._lu = spla.splu(
                    A,
                    permc_spec="MMD_AT_PLUS_A",
                    diag_pivot_thresh=0.0,
                    options={"SymmetricMode": True},
                )
            except RuntimeError as exc:
                raise NotPositiveDefiniteError(f"factorization failed: {exc}") from exc
            piv = self._lu.U.diagonal()
            if not np.all(piv > 0):
                raise NotPositiveDefiniteError(
                    f"operator is not positive definite (min pivot {piv.min():.3e})"
                )
        else:
            try:
                self._cho = sla.cho_factor(np.asarray(A, dtype=float), lower=True, check_finite=True)
            except sla.LinAlgError as exc:
                raise NotPositiveDefiniteError(str(exc)) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.n == 0:
            return np.zeros_like(b)
        if self.sparse:
            return self._lu.solve(b)
        return sla.cho_solve(self._cho, b, check_finite=False)


def solve_spd(A, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Raises :class:`NotPositiveDefiniteError` for singular or indefinite input.
    """
    mat = A.matrix if isinstance(A, SparseOperator) else A
    x = SpdFactor(mat).solve(b)
    r = mat @ x - b
    bn = np.linalg.norm(b)
    if np.linalg.norm(r) > 1e-10 * max(bn, np.finfo(float).tiny) and bn > 0:
        raise NotPositiveDefiniteError(
            f"residual {np.linalg.norm(r):.3e} exceeds tolerance; operator is ill-conditioned"
        )
    return x


def fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Flip columns so that each column's largest-magnitude entry is positive."""
    if vecs.size == 0:
        return vecs
    idx = np.argmax(np.abs(vecs), axis=0)
    s = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    s[s == 0] = 1.0
    return vecs * s


def generalized_eig_smallest(A, B, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Smallest ``k`` eigenpairs of the symmetric pencil ``A phi = lam B phi``.

    Eigenvalues ascend and eigenvectors are B-orthonormal with the sign fixed
    by :func:`fix_signs`.
    """
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    B = B.toarray() if sp.issparse(B) else np.asarray(B, dtype=float)
    n = A.shape[0]
    if A.shape != (n, n) or B.shape != (n, n):
        raise ValueError("pencil matrices must be square and of equal size")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    _check_symmetric(A, "stiffness")
    _check_symmetric(B, "mass")
    A = 0.5 * (A + A.T)
    B = 0.5 * (B + B.T)
    try:
        vals, vecs = sla.eigh(A, B, subset_by_index=[0, k - 1])
    except sla.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"generalized eigenproblem failed: {exc}") from exc
    return vals, fix_signs(vecs)
