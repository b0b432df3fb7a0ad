import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from dybo_gmsfem import DyboGMsFEM
from dybo_gmsfem._validation import check_fields, check_positive_float, check_positive_int
from dybo_gmsfem.experiment import initial_fields
from dybo_gmsfem.media import EXAMPLE1_FLUCTUATIONS, CoefficientModel, high_contrast_mean, trig_field


def make_model(g):
    return CoefficientModel(high_contrast_mean(g, 1, 4.0, 100.0, 1), [trig_field(g, *s) for s in EXAMPLE1_FLUCTUATIONS])


def test_params_round_trip():
    est = DyboGMsFEM(m=2, dt=5e-4, online=True)
    params = clone(est).get_params()
    assert params["m"] == 2 and params["dt"] == 5e-4 and params["online"] is True
    est.set_params(theta=0.1)
    assert est.theta == 0.1


@pytest.mark.parametrize("online", [False, True])
def test_fit_predict(online):
    est = DyboGMsFEM(n_coarse=3, n_fine_per_coarse=4, l_per_node=2, m=2, online=online)
    with pytest.raises(NotFittedError):
        est.predict((None, None), [1e-3])
    est.fit(make_model)
    mean, modes = initial_fields(est.grid_, "example1", 2)
    out = est.predict((mean, modes), [2e-3, 1e-3])
    assert len(out) == 2
    for u, U in out:
        assert u.shape == (est.fine_.n,) and U.shape == (est.fine_.n, 2)
        assert np.all(np.isfinite(u))
    # the source term drives the mean up while the diffusion decays the initial bump
    assert not np.allclose(out[0][0], out[1][0])


def test_invalid_inputs():
    with pytest.raises(ValueError):
        DyboGMsFEM(m=0).fit(make_model)
    with pytest.raises(TypeError):
        DyboGMsFEM(dt="fast").fit(make_model)
    with pytest.raises(ValueError):
        DyboGMsFEM(n_coarse=3, n_fine_per_coarse=4, m=10).fit(make_model)
    with pytest.raises(TypeError):
        DyboGMsFEM(n_coarse=3, n_fine_per_coarse=4).fit(np.ones((3, 3)))
    est = DyboGMsFEM(n_coarse=3, n_fine_per_coarse=4, l_per_node=2, m=2).fit(make_model)
    mean, modes = initial_fields(est.grid_, "example1", 2)
    with pytest.raises(ValueError):
        est.predict((mean, modes), [1.5e-3])
    with pytest.raises(ValueError):
        est.predict((mean[:-1], modes), [1e-3])
    with pytest.raises(ValueError):
        est.predict((mean, modes[:, :1]), [1e-3])


def test_validation_helpers():
    assert check_positive_int(3, "n") == 3
    with pytest.raises(TypeError):
        check_positive_int(True, "n")
    with pytest.raises(ValueError):
        check_positive_int(0, "n")
    assert check_positive_float(0, "x", allow_zero=True) == 0.0
    with pytest.raises(ValueError):
        check_positive_float(np.inf, "x")
    assert check_fields(np.ones(4), 4, "u", 1).shape == (4, 1)
    with pytest.raises(ValueError, match="non-finite"):
        check_fields([np.nan, 1.0], 2, "u")
