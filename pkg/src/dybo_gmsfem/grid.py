"""Nested structured coarse/fine grids on the unit square.

Fine nodes are numbered row-major, ``node = iy * (nf + 1) + ix``, and fine
cells ``cell = cy * nf + cx`` where ``nf`` is the number of fine cells per
side. Interior coarse nodes are numbered row-major over ``(I, J)`` with
``1 <= I, J <= n_coarse - 1``; the Python index is zero-based.

Mesh sizes are stored as side lengths ``1/n``. The cell diagonal ``sqrt(2)/n``
(the convention in which the coarse size of a 10x10 grid reads ``sqrt(2)/10``)
is available as :attr:`GridPair.H_diag` / :attr:`GridPair.h_diag`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Neighborhood:
    """Fine-grid description of a coarse neighborhood ``D_i``."""

    index: int
    coarse_node: tuple[int, int]
    coarse_cells: np.ndarray
    cells: np.ndarray
    nodes: np.ndarray
    boundary_nodes: np.ndarray
    interior_nodes: np.ndarray

    @property
    def n_snapshots(self) -> int:
        return len(self.boundary_nodes)


@dataclass(frozen=True)
class GridPair:
    n_coarse: int
    n_fine_per_coarse: int
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def nf(self) -> int:
        """Fine cells per side."""
        return self.n_coarse * self.n_fine_per_coarse

    @property
    def H(self) -> float:
        return 1.0 / self.n_coarse

    @property
    def h(self) -> float:
        return 1.0 / self.nf

    @property
    def H_diag(self) -> float:
        return np.sqrt(2.0) * self.H

    @property
    def h_diag(self) -> float:
        return np.sqrt(2.0) * self.h

    @property
    def n_nodes(self) -> int:
        return (self.nf + 1) ** 2

    @property
    def n_cells(self) -> int:
        return self.nf**2

    @property
    def n_interior_coarse(self) -> int:
        return (self.n_coarse - 1) ** 2

    def node_id(self, ix, iy):
        return np.asarray(iy) * (self.nf + 1) + np.asarray(ix)

    def cell_id(self, cx, cy):
        return np.asarray(cy) * self.nf + np.asarray(cx)

    @cached_property
    def node_coords(self) -> np.ndarray:
        """(n_nodes, 2) array of fine node coordinates."""
        t = np.linspace(0.0, 1.0, self.nf + 1)
        x, y = np.meshgrid(t, t)
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def cell_centers(self) -> np.ndarray:
        """(n_cells, 2) array of fine cell centres."""
        t = (np.arange(self.nf) + 0.5) * self.h
        x, y = np.meshgrid(t, t)
        return np.column_stack([x.ravel(), y.ravel()])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """(n_cells, 4) node ids per cell, counter-clockwise from the lower-left."""
        cx, cy = np.meshgrid(np.arange(self.nf), np.arange(self.nf))
        cx, cy = cx.ravel(), cy.ravel()
        return np.column_stack([
            self.node_id(cx, cy),
            self.node_id(cx + 1, cy),
            self.node_id(cx + 1, cy + 1),
            self.node_id(cx, cy + 1),
        ])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        """Fine nodes on the boundary of the unit square."""
        ix, iy = np.meshgrid(np.arange(self.nf + 1), np.arange(self.nf + 1))
        on = (ix == 0) | (iy == 0) | (ix == self.nf) | (iy == self.nf)
        return np.flatnonzero(on.ravel())

    @cached_property
    def interior_nodes(self) -> np.ndarray:
        """Fine nodes strictly inside the unit square; these are the global dofs."""
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[self.boundary_nodes] = False
        return np.flatnonzero(mask)

    @cached_property
    def dof_of_node(self) -> np.ndarray:
        """Map node id -> global dof index, -1 on the Dirichlet boundary."""
        out = np.full(self.n_nodes, -1, dtype=np.int64)
        out[self.interior_nodes] = np.arange(len(self.interior_nodes))
        return out

    @cached_property
    def interior_coarse_nodes(self) -> list[tuple[int, int]]:
        n = self.n_coarse
        return [(I, J) for J in range(1, n) for I in range(1, n)]

    def coarse_cell_fine_cells(self, KI: int, KJ: int) -> np.ndarray:
        """Fine cells inside coarse cell ``(KI, KJ)`` (lower-left corner indices)."""
        n = self.n_fine_per_coarse
        cx, cy = np.meshgrid(np.arange(KI * n, (KI + 1) * n), np.arange(KJ * n, (KJ + 1) * n))
        return np.sort(self.cell_id(cx.ravel(), cy.ravel()))

    def coarse_cell_nodes(self, KI: int, KJ: int) -> np.ndarray:
        n = self.n_fine_per_coarse
        ix, iy = np.meshgrid(np.arange(KI * n, (KI + 1) * n + 1), np.arange(KJ * n, (KJ + 1) * n + 1))
        return self.node_id(ix.ravel(), iy.ravel())

    def neighborhood(self, i: int) -> Neighborhood:
        return neighborhood(self, i)

    def overlaps(self, i: int, j: int) -> bool:
        """True when neighborhoods ``i`` and ``j`` share a coarse cell."""
        Ii, Ji = self.interior_coarse_nodes[i]
        Ij, Jj = self.interior_coarse_nodes[j]
        return abs(Ii - Ij) <= 1 and abs(Ji - Jj) <= 1


def build_grids(n_coarse: int, n_fine_per_coarse: int) -> GridPair:
    """Build the nested coarse/fine grid pair on (0, 1)^2."""
    for name, v in (("n_coarse", n_coarse), ("n_fine_per_coarse", n_fine_per_coarse)):
        if int(v) != v or v < 2:
            raise ValueError(f"{name} must be an integer >= 2, got {v!r}")
    return GridPair(int(n_coarse), int(n_fine_per_coarse))


def neighborhood(g: GridPair, i: int) -> Neighborhood:
    """Coarse neighborhood of interior coarse node ``i`` (zero-based)."""
    if not 0 <= i < g.n_interior_coarse:
        raise IndexError(f"neighborhood index {i} outside [0, {g.n_interior_coarse})")
    cached = g._cache.get(("nbh", i))
    if cached is not None:
        return cached
    I, J = g.interior_coarse_nodes[i]
    n = g.n_fine_per_coarse
    lo_x, hi_x = (I - 1) * n, (I + 1) * n
    lo_y, hi_y = (J - 1) * n, (J + 1) * n
    ix, iy = np.meshgrid(np.arange(lo_x, hi_x + 1), np.arange(lo_y, hi_y + 1))
    ix, iy = ix.ravel(), iy.ravel()
    nodes = g.node_id(ix, iy)
    rim = (ix == lo_x) | (ix == hi_x) | (iy == lo_y) | (iy == hi_y)
    cx, cy = np.meshgrid(np.arange(lo_x, hi_x), np.arange(lo_y, hi_y))
    coarse_cells = np.array([(KI, KJ) for KJ in (J - 1, J) for KI in (I - 1, I)])
    nb = Neighborhood(
        index=i,
        coarse_node=(I, J),
        coarse_cells=coarse_cells,
        cells=np.sort(g.cell_id(cx.ravel(), cy.ravel())),
        nodes=nodes,
        boundary_nodes=nodes[rim],
        interior_nodes=nodes[~rim],
    )
    g._cache[("nbh", i)] = nb
    return nb
