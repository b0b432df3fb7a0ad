"""Polynomial chaos bookkeeping for i.i.d. uniform inputs on [-1, 1].

The basis excludes the constant polynomial, so every basis function has
zero mean. Multi-indices are ordered by total degree and, within a degree,
reverse-lexicographically so that the degree-one indices come out as
``e_1, ..., e_r``.
"""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from math import comb

import numpy as np
from numpy.polynomial import legendre

logger = logging.getLogger(__name__)


class LegendreFamily:
    """Legendre polynomials normalised against the uniform density 1/2 on [-1, 1]."""

    name = "legendre"

    def __call__(self, n: int, x) -> np.ndarray:
        c = np.zeros(n + 1)
        c[n] = np.sqrt(2 * n + 1)
        return legendre.legval(np.asarray(x, dtype=float), c)

    def quadrature(self, npts: int) -> tuple[np.ndarray, np.ndarray]:
        """Gauss rule with weights summing to one (probability measure)."""
        x, w = legendre.leggauss(npts)
        return x, w / 2.0


def multi_index_set(r: int, p: int) -> np.ndarray:
    """Nonzero multi-indices of ``r`` variables with total degree ``<= p``."""
    if int(r) != r or r < 1:
        raise ValueError(f"r must be a positive integer, got {r!r}")
    if int(p) != p or p < 1:
        raise ValueError(f"p must be a positive integer, got {p!r}")
    out = []
    for deg in range(1, p + 1):
        level = [a for a in itertools.product(range(deg + 1), repeat=r) if sum(a) == deg]
        level.sort(reverse=True)
        out.extend(level)
    return np.array(out, dtype=np.int64).reshape(-1, r)


@dataclass
class GpcSpace:
    r: int
    p: int
    family: LegendreFamily = field(default_factory=LegendreFamily)
    debug: bool = False

    def __post_init__(self):
        self.indices = multi_index_set(self.r, self.p)
        self.T0, self.T1 = moment_tensors(self)

    @property
    def n_p(self) -> int:
        return len(self.indices)

    @property
    def expected_size(self) -> int:
        return comb(self.p + self.r, self.r) - 1

    def eval(self, xi) -> np.ndarray:
        return eval_basis(self, xi)

    def univariate_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """``E[xi H_a]`` and ``E[xi H_a H_b]`` for ``a, b = 0..p`` (exact quadrature)."""
        x, w = self.family.quadrature(self.p + 2)
        H = np.array([self.family(n, x) for n in range(self.p + 1)])
        e1 = H @ (w * x)
        m1 = (H * (w * x)) @ H.T
        return e1, 0.5 * (m1 + m1.T)


def eval_basis(space: GpcSpace, xi) -> np.ndarray:
    """Row of basis values ``H(xi)``; accepts a single point or an (n, r) batch."""
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    pts = np.atleast_2d(xi)
    if pts.shape[1] != space.r:
        raise ValueError(f"expected points in R^{space.r}, got shape {xi.shape}")
    if space.debug and np.any(np.abs(pts) > 1):
        logger.warning("eval_basis: %d points outside [-1, 1]^r", int(np.sum(np.any(np.abs(pts) > 1, axis=1))))
    uni = np.stack([space.family(n, pts) for n in range(space.p + 1)])  # (p+1, n, r)
    out = np.ones((pts.shape[0], space.n_p))
    for k in range(space.r):
        out *= uni[space.indices[:, k], :, k].T
    return out[0] if single else out


def moment_tensors(space: GpcSpace) -> tuple[np.ndarray, np.ndarray]:
    """``T0[i] = E[xi_i H]`` (shape (r, N_p)) and ``T1[i] = E[xi_i H^T H]`` (r, N_p, N_p).

    The uniform measure is a product measure, so the tensorised Gauss rule
    with ``p + 2`` points per coordinate factorises into univariate tables.
    """
    e1, m1 = space.univariate_tables()
    idx = space.indices
    r, n = space.r, len(idx)
    T0 = np.zeros((r, n))
    T1 = np.zeros((r, n, n))
    for i in range(r):
        others = np.delete(np.arange(r), i)
        rest_zero = np.all(idx[:, others] == 0, axis=1)
        T0[i] = np.where(rest_zero, e1[idx[:, i]], 0.0)
        same_rest = np.all(idx[:, None, others] == idx[None, :, others], axis=2)
        T1[i] = np.where(same_rest, m1[idx[:, i][:, None], idx[:, i][None, :]], 0.0)
        T1[i] = 0.5 * (T1[i] + T1[i].T)
    return T0, T1


def extended_tensors(space: GpcSpace) -> np.ndarray:
    """``E[xi_i H_a H_b]`` over the basis augmented with the constant (index 0 first)."""
    r, n = space.r, space.n_p
    T = np.zeros((r, n + 1, n + 1))
    T[:, 1:, 1:] = space.T1
    T[:, 0, 1:] = space.T0
    T[:, 1:, 0] = space.T0
    return T
