"""GMsFEM offline stage: partition of unity, snapshots, local spectral bases.

All local functions are fine-grid nodal vectors. The offline space is
returned as a sparse prolongation ``R`` from coarse coefficients to global
fine dofs (interior fine nodes).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    Q1_STIFFNESS, as_cell_field, assemble_mass, assemble_stiffness, fix_signs, generalized_eig_smallest,
)
from .grid import GridPair, neighborhood

logger = logging.getLogger(__name__)


class RankDeficiencyError(np.linalg.LinAlgError):
    pass


@dataclass
class PartitionOfUnity:
    """a-harmonic coarse hat functions on the fine grid.

    ``chi_all`` holds one column per coarse node (boundary nodes included,
    row-major over ``(I, J)``, ``0 <= I, J <= n_coarse``) so that the columns
    sum to one everywhere; ``chi`` is the sub-matrix of interior coarse nodes
    used to build the multiscale space.
    """

    grid: GridPair
    chi_all: sp.csc_matrix
    weight: np.ndarray = field(repr=False)

    @property
    def chi(self) -> sp.csc_matrix:
        n = self.grid.n_coarse
        cols = [J * (n + 1) + I for (I, J) in self.grid.interior_coarse_nodes]
        return self.chi_all[:, cols]

    def column(self, i: int) -> np.ndarray:
        """Dense nodal vector of ``chi_i`` for interior coarse node ``i``."""
        I, J = self.grid.interior_coarse_nodes[i]
        return self.chi_all[:, J * (self.grid.n_coarse + 1) + I].toarray().ravel()


def _bilinear_hat(s, t, corner: int):
    return [(1 - s) * (1 - t), s * (1 - t), s * t, (1 - s) * t][corner]


def partition_of_unity(g: GridPair, abar) -> PartitionOfUnity:
    """Solve ``-div(abar grad chi) = 0`` on each coarse cell with bilinear boundary data."""
    abar = as_cell_field(abar, g, "abar")
    n, nc = g.n_fine_per_coarse, g.n_coarse
    s1 = np.linspace(0.0, 1.0, n + 1)
    S, T = np.meshgrid(s1, s1)
    S, T = S.ravel(), T.ravel()
    rim = (S == 0) | (S == 1) | (T == 0) | (T == 1)
    rows, cols, vals = [], [], []
    for KJ in range(nc):
        for KI in range(nc):
            nodes = g.coarse_cell_nodes(KI, KJ)
            cells = g.coarse_cell_fine_cells(KI, KJ)
            K = assemble_stiffness(abar, g, cells=cells)
            # K.dofs is sorted; coarse_cell_nodes is row-major, hence also sorted
            Kc = K.matrix.tocsc()
            Kii = Kc[~rim][:, ~rim]
            Kib = Kc[~rim][:, rim]
            data = np.column_stack([_bilinear_hat(S, T, c) for c in range(4)])
            U = np.empty_like(data)
            U[rim] = data[rim]
            if Kii.shape[0]:
                U[~rim] = -spla.splu(Kii.tocsc()).solve(np.asarray(Kib @ data[rim]))
            corners = [(KI, KJ), (KI + 1, KJ), (KI + 1, KJ + 1), (KI, KJ + 1)]
            for c, (I, J) in enumerate(corners):
                col = J * (nc + 1) + I
                nz = np.abs(U[:, c]) > 0
                rows.append(nodes[nz])
                cols.append(np.full(nz.sum(), col))
                vals.append(U[nz, c])
    rows, cols, vals = map(np.concatenate, (rows, cols, vals))
    # nodes on coarse edges are visited from each adjacent cell with identical data
    coo = sp.coo_matrix((vals, (rows, cols)), shape=(g.n_nodes, (nc + 1) ** 2))
    counts = sp.coo_matrix((np.ones_like(vals), (rows, cols)), shape=coo.shape).tocsc()
    chi_all = coo.tocsc()
    chi_all.data /= counts.data
    pou = PartitionOfUnity(g, chi_all, weight=np.zeros(g.n_cells))
    pou.weight = spectral_weight(g, abar, pou)
    return pou


def spectral_weight(g: GridPair, abar, pou: PartitionOfUnity) -> np.ndarray:
    """Per-cell ``abar * H^2 * sum_i |grad chi_i|^2`` (cell average, interior nodes only)."""
    abar = as_cell_field(abar, g, "abar")
    chi = pou.chi.tocsc()
    conn = g.cell_nodes
    total = np.zeros(g.n_cells)
    for i in range(chi.shape[1]):
        col = chi[:, i].toarray().ravel()
        e = col[conn]
        total += np.einsum("ci,ij,cj->c", e, Q1_STIFFNESS, e) / g.h**2
    return abar * g.H**2 * total


@dataclass
class SnapshotSet:
    """a-harmonic extensions of boundary deltas on one neighborhood."""

    index: int
    nodes: np.ndarray  # fine node ids of D_i (sorted)
    values: np.ndarray  # (len(nodes), L_i); column j is delta at boundary_nodes[j]
    boundary_nodes: np.ndarray


def snapshots(g: GridPair, abar, i: int) -> SnapshotSet:
    abar = as_cell_field(abar, g, "abar")
    nb = neighborhood(g, i)
    K = assemble_stiffness(abar, g, cells=nb.cells)
    nodes = K.dofs
    on_rim = np.isin(nodes, nb.boundary_nodes)
    Kc = K.matrix.tocsc()
    Kii = Kc[~on_rim][:, ~on_rim].tocsc()
    Kib = Kc[~on_rim][:, on_rim]
    L = int(on_rim.sum())
    vals = np.zeros((len(nodes), L))
    vals[on_rim] = np.eye(L)
    vals[~on_rim] = -spla.splu(Kii).solve(Kib.toarray())
    return SnapshotSet(i, nodes, vals, nodes[on_rim])


@dataclass
class SpectralBasis:
    index: int
    nodes: np.ndarray
    vectors: np.ndarray  # (len(nodes), l_i)
    eigenvalues: np.ndarray  # (l_i + 1,)


def spectral_basis(g: GridPair, abar, pou: PartitionOfUnity, i: int, l_i: int,
                   snaps: SnapshotSet | None = None) -> SpectralBasis:
    """Smallest eigenpairs of ``(abar grad phi, grad v) = lam (ahat phi, v)`` on the snapshot space."""
    abar = as_cell_field(abar, g, "abar")
    snaps = snapshots(g, abar, i) if snaps is None else snaps
    nb = neighborhood(g, i)
    L = snaps.values.shape[1]
    if not 1 <= l_i < L:
        raise ValueError(f"need 1 <= l_i < L_i = {L}, got {l_i}")
    ahat = pou.weight[nb.cells]
    if not np.any(ahat > 0):
        raise ValueError(f"spectral weight vanishes identically on neighborhood {i}")
    K = assemble_stiffness(abar, g, cells=nb.cells)
    Mw = assemble_mass(g, cells=nb.cells, weight=pou.weight)
    Psi = snaps.values
    A = Psi.T @ (K.matrix @ Psi)
    B = Psi.T @ (Mw.matrix @ Psi)
    A, B = 0.5 * (A + A.T), 0.5 * (B + B.T)
    # The snapshots sum to one, so the constant is an exact null vector of the
    # stiffness form. Deflate it explicitly: a dense solve would only resolve
    # it to eps * lambda_max, which is large for high-contrast media.
    ones = np.ones(L)
    Bc = B @ ones
    cBc = float(ones @ Bc)
    lam0 = float(np.ones(len(snaps.nodes)) @ (K.matrix @ np.ones(len(snaps.nodes)))) / cBc
    Z = np.linalg.qr(Bc[:, None], mode="complete")[0][:, 1:]  # B-orthogonal complement of the constant
    lam_rest, y = generalized_eig_smallest(Z.T @ A @ Z, Z.T @ B @ Z, l_i)
    lam = np.concatenate([[lam0], lam_rest])
    v = np.column_stack([ones / np.sqrt(cBc), Z @ y])
    return SpectralBasis(i, snaps.nodes, fix_signs(Psi @ v[:, :l_i]), lam)


@dataclass
class OfflineSpace:
    """Multiscale space ``span{chi_i phi_j^(i)}`` as a prolongation to fine dofs."""

    grid: GridPair
    R: sp.csc_matrix
    l: np.ndarray
    eigenvalues: list
    owner: np.ndarray  # neighborhood index of each column
    pou: PartitionOfUnity | None = None

    @property
    def n_d(self) -> int:
        return self.R.shape[1]

    def lambda_next(self) -> np.ndarray:
        """``lambda_{l_i + 1}`` per neighborhood."""
        return np.array([ev[l] for ev, l in zip(self.eigenvalues, self.l)])


def check_rank(R, M, tol: float = 1e-12) -> float:
    """Return the scaled smallest Gram eigenvalue; raise if the columns are dependent."""
    G = (R.T @ (M @ R))
    G = G.toarray() if sp.issparse(G) else np.asarray(G)
    d = np.sqrt(np.diag(G))
    if np.any(d == 0):
        raise RankDeficiencyError(f"zero basis column(s): {np.flatnonzero(d == 0)[:10]}")
    Gs = G / np.outer(d, d)
    smin = np.linalg.eigvalsh(0.5 * (Gs + Gs.T))[0]
    if smin <= tol:
        raise RankDeficiencyError(f"offline basis is rank deficient (scaled Gram min eig {smin:.3e})")
    return float(smin)


def build_offline_space(g: GridPair, abar, l, pou: PartitionOfUnity | None = None,
                        check: bool = True) -> OfflineSpace:
    """Assemble the offline space with ``l`` eigenfunctions per neighborhood.

    ``l`` is an integer (uniform) or a sequence with one count per interior
    coarse node. Columns are ordered by neighborhood, then eigenvalue.
    """
    abar = as_cell_field(abar, g, "abar")
    nin = g.n_interior_coarse
    l = np.full(nin, int(l), dtype=np.int64) if np.isscalar(l) else np.asarray(l, dtype=np.int64)
    if l.shape != (nin,) or np.any(l < 1):
        raise ValueError(f"l must be a positive count or {nin} positive counts")
    pou = partition_of_unity(g, abar) if pou is None else pou
    dof = g.dof_of_node
    rows, cols, vals, eigs, owner = [], [], [], [], []
    col0 = 0
    for i in range(nin):
        sb = spectral_basis(g, abar, pou, i, int(l[i]))
        chi = pou.column(i)[sb.nodes]
        B = chi[:, None] * sb.vectors
        d = dof[sb.nodes]
        keep = (d >= 0) & np.any(B != 0, axis=1)
        for j in range(B.shape[1]):
            rows.append(d[keep])
            cols.append(np.full(keep.sum(), col0 + j))
            vals.append(B[keep, j])
        eigs.append(sb.eigenvalues)
        owner.extend([i] * B.shape[1])
        col0 += B.shape[1]
    R = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(g.interior_nodes), col0),
    ).tocsc()
    space = OfflineSpace(g, R, l, eigs, np.asarray(owner), pou)
    if check:
        M = assemble_mass(g, dirichlet=g.boundary_nodes).matrix
        check_rank(R, M)
    logger.info("offline space: %d basis functions on %d neighborhoods", col0, nin)
    return space
