import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dybo_gmsfem.grid import build_grids
from dybo_gmsfem.media import (
    EXAMPLE1_FLUCTUATIONS, EXAMPLE2_FLUCTUATIONS, TRIG_VARIANTS, CoefficientModel, high_contrast_mean,
    raster_import, trig_field, trig_formula,
)


def test_example1_first_fluctuation():
    assert EXAMPLE1_FLUCTUATIONS[0] == (0.04, 1.6, 1 / 8, "diag-sin")
    x1, x2 = 0.3, 0.1
    s = 2 * np.pi * (x1 - x2) / (1 / 8)
    expected = 0.04 * (2 + 1.6 * np.sin(s)) / (2 - 1.6 * np.cos(s))
    assert trig_formula(x1, x2, *EXAMPLE1_FLUCTUATIONS[0]) == pytest.approx(expected)


def test_example1_other_fluctuations_pointwise():
    x1, x2 = 0.37, 0.81
    k2, k3 = 2 * np.pi * 7, 2 * np.pi * 6
    a2 = 0.08 * (2 + 1.5 * np.cos(k2 * x1)) / (2 - 1.5 * np.sin(k2 * x2))
    a3 = 0.16 * (2 + 1.4 * np.sin(k3 * (x1 - 0.5))) / (2 - 1.4 * np.cos(k3 * (x2 - 0.5)))
    assert trig_formula(x1, x2, *EXAMPLE1_FLUCTUATIONS[1]) == pytest.approx(a2)
    assert trig_formula(x1, x2, *EXAMPLE1_FLUCTUATIONS[2]) == pytest.approx(a3)


def test_example2_fields_positive_and_bounded():
    g = build_grids(10, 10)
    for amp, P, eps, variant in EXAMPLE2_FLUCTUATIONS:
        a = trig_field(g, amp, P, eps, variant)
        assert a.shape == (g.n_cells,)
        assert np.all(a > 0)
        assert np.all(a <= amp * (2 + P) / (2 - P) + 1e-14)


@settings(max_examples=40, deadline=None)
@given(amp=st.floats(0.001, 1.0), P=st.floats(-1.9, 1.9), eps=st.floats(0.05, 1.0),
       variant=st.sampled_from(TRIG_VARIANTS), x=st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_trig_bounds(amp, P, eps, variant, x):
    v = trig_formula(x[0], x[1], amp, P, eps, variant)
    lo = amp * (2 - abs(P)) / (2 + abs(P))
    hi = amp * (2 + abs(P)) / (2 - abs(P))
    assert lo * (1 - 1e-12) <= v <= hi * (1 + 1e-12)


def test_trig_field_argument_checks():
    g = build_grids(2, 2)
    with pytest.raises(ValueError):
        trig_field(g, 1.0, 2.0, 0.1, "diag-sin")
    with pytest.raises(ValueError):
        trig_field(g, 1.0, 1.0, 0.0, "diag-sin")
    with pytest.raises(ValueError, match="unknown variant"):
        trig_field(g, 1.0, 1.0, 0.1, "nope")


def test_high_contrast_mean_range_and_determinism():
    g = build_grids(10, 10)
    a = high_contrast_mean(g, 3, 4, 1000, 7)
    assert a.min() == 4 and a.max() == 1000
    np.testing.assert_array_equal(a, high_contrast_mean(g, 3, 4, 1000, 7))
    assert not np.array_equal(a, high_contrast_mean(g, 3, 4, 1000, 8))
    with pytest.raises(ValueError):
        high_contrast_mean(g, 3, 4, 2, 7)


def test_raster_import(tmp_path):
    g = build_grids(2, 2)
    data = np.array([[1.0, 2.0], [3.0, 4.0]])  # top row is y = 1
    path = tmp_path / "perm.txt"
    np.savetxt(path, data)
    a = raster_import(path, g, scale=0.01).reshape(g.nf, g.nf)
    assert a[0, 0] == pytest.approx(0.03)  # bottom-left cell
    assert a[-1, -1] == pytest.approx(0.02)
    np.testing.assert_allclose(np.sort(np.unique(a)), [0.01, 0.02, 0.03, 0.04])
    np.savetxt(path, np.ones((3, 3)))
    with pytest.raises(ValueError, match="does not divide"):
        raster_import(path, g)
    np.savetxt(path, -np.ones((2, 2)))
    with pytest.raises(ValueError, match="positive"):
        raster_import(path, g)


def test_coefficient_model_positivity():
    g = build_grids(2, 2)
    good = CoefficientModel(np.full(g.n_cells, 1.0), [np.full(g.n_cells, 0.3), np.full(g.n_cells, -0.3)])
    assert good.r == 2
    assert good.a_min == pytest.approx(0.4) and good.a_max == pytest.approx(1.6)
    np.testing.assert_allclose(good.sample([1.0, 1.0]), 1.0)
    with pytest.raises(ValueError, match="not uniformly positive"):
        CoefficientModel(np.full(g.n_cells, 1.0), [np.full(g.n_cells, 0.6), np.full(g.n_cells, 0.5)])
    with pytest.raises(ValueError):
        CoefficientModel(np.ones(4), [np.ones(5)])
