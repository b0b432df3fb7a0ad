import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dybo_gmsfem.gpc import GpcSpace, LegendreFamily, eval_basis, extended_tensors, moment_tensors, multi_index_set


def _tensor_quadrature_oracle(space):
    """Brute-force E[xi_i H], E[xi_i H H^T] on the full tensor Gauss grid."""
    x, w = np.polynomial.legendre.leggauss(space.p + 2)
    w = w / 2
    pts = np.array(list(itertools.product(x, repeat=space.r)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=space.r))), axis=1)
    H = eval_basis(space, pts)
    T0 = np.stack([(wts * pts[:, i]) @ H for i in range(space.r)])
    T1 = np.stack([H.T @ ((wts * pts[:, i])[:, None] * H) for i in range(space.r)])
    return T0, T1, H.T @ (wts[:, None] * H)


@pytest.mark.parametrize("r, p, expected", [(3, 2, 9), (4, 2, 14), (1, 1, 1), (2, 3, 9)])
def test_basis_size(r, p, expected):
    assert GpcSpace(r, p).n_p == expected


@settings(max_examples=30, deadline=None)
@given(r=st.integers(1, 5), p=st.integers(1, 4))
def test_basis_size_matches_binomial(r, p):
    idx = multi_index_set(r, p)
    assert len(idx) == comb(p + r, r) - 1
    assert len({tuple(a) for a in idx}) == len(idx)
    assert idx.sum(axis=1).min() == 1 and idx.sum(axis=1).max() == p
    # degree-one indices first, as e_1, ..., e_r
    np.testing.assert_array_equal(idx[:r], np.eye(r, dtype=int))


def test_invalid_sizes():
    for r, p in [(0, 2), (2, 0), (1.5, 2)]:
        with pytest.raises(ValueError):
            multi_index_set(r, p)


def test_normalized_legendre_values():
    fam = LegendreFamily()
    assert fam(1, 1.0) == pytest.approx(np.sqrt(3))
    assert fam(2, 1.0) == pytest.approx(np.sqrt(5))
    space = GpcSpace(3, 2)
    assert eval_basis(space, [1.0, 0.0, 0.0])[0] == pytest.approx(np.sqrt(3))
    with pytest.raises(ValueError):
        eval_basis(space, [0.0, 0.0])


def test_orthonormality_exact_and_sampled():
    space = GpcSpace(3, 2)
    _, _, gram = _tensor_quadrature_oracle(space)
    np.testing.assert_allclose(gram, np.eye(space.n_p), atol=1e-13)
    xi = np.random.default_rng(0).uniform(-1, 1, (1_000_000, 3))
    H = eval_basis(space, xi)
    assert np.max(np.abs(H.T @ H / len(xi) - np.eye(space.n_p))) < 3e-3
    assert np.max(np.abs(H.mean(axis=0))) < 3e-3


@pytest.mark.parametrize("r, p", [(1, 1), (2, 2), (3, 2), (4, 2), (2, 3)])
def test_moment_tensors_match_tensor_quadrature(r, p):
    space = GpcSpace(r, p)
    T0, T1 = moment_tensors(space)
    Q0, Q1, _ = _tensor_quadrature_oracle(space)
    np.testing.assert_allclose(T0, Q0, atol=1e-13)
    np.testing.assert_allclose(T1, Q1, atol=1e-13)


def test_moment_tensor_spot_values():
    space = GpcSpace(3, 2)
    idx = [tuple(a) for a in space.indices]
    e1, two_e1 = idx.index((1, 0, 0)), idx.index((2, 0, 0))
    assert space.T0[0, e1] == pytest.approx(1 / np.sqrt(3), abs=1e-14)
    assert space.T1[0, e1, two_e1] == pytest.approx(2 / np.sqrt(15), abs=1e-14)
    # only degree-one entries of T0 survive
    assert np.count_nonzero(np.abs(space.T0) > 1e-14) == 3


def test_extended_tensors_layout():
    space = GpcSpace(2, 2)
    T = extended_tensors(space)
    assert T.shape == (2, space.n_p + 1, space.n_p + 1)
    np.testing.assert_array_equal(T[:, 0, 0], 0.0)
    np.testing.assert_array_equal(T[:, 0, 1:], space.T0)
    np.testing.assert_array_equal(T[:, 1:, 1:], space.T1)
    np.testing.assert_array_equal(T, np.transpose(T, (0, 2, 1)))
