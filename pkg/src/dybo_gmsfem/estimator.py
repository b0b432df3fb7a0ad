"""scikit-learn style facade: ``fit`` runs the offline stage, ``predict`` integrates in time.

The "data" handed to :meth:`DyboGMsFEM.fit` is the coefficient model, not
a sample matrix; the estimator exists for parameter handling
(``get_params``/``set_params``/``clone``) and a compact workflow.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._validation import check_fields, check_positive_float, check_positive_int
from .dybo import DyboIntegrator, assemble_operators, fine_operators, init_state
from .experiment import kl_fields
from .gpc import GpcSpace
from .grid import build_grids
from .media import CoefficientModel
from .msbasis import build_offline_space
from .online import OnlineDyboIntegrator


class DyboGMsFEM(BaseEstimator):
    """DyBO time integration on a GMsFEM space.

    Parameters
    ----------
    n_coarse, n_fine_per_coarse : grid sizes (cells per side).
    l_per_node : offline eigenfunctions per coarse neighborhood.
    m : number of KL modes; ``p`` : total gPC degree.
    dt : time step; ``recast_stride`` : steps between scheduled recasts.
    online : enrich the space from local residuals at every step.
    theta, max_rounds : enrichment stopping rule.
    f : constant source term.
    """

    def __init__(self, n_coarse=4, n_fine_per_coarse=8, l_per_node=4, m=3, p=2, dt=1e-3,
                 recast_stride=20, online=False, theta=0.05, max_rounds=5, f=1.0):
        self.n_coarse = n_coarse
        self.n_fine_per_coarse = n_fine_per_coarse
        self.l_per_node = l_per_node
        self.m = m
        self.p = p
        self.dt = dt
        self.recast_stride = recast_stride
        self.online = online
        self.theta = theta
        self.max_rounds = max_rounds
        self.f = f

    def _validate_params(self):
        check_positive_int(self.n_coarse, "n_coarse", 2)
        check_positive_int(self.n_fine_per_coarse, "n_fine_per_coarse", 2)
        check_positive_int(self.l_per_node, "l_per_node")
        check_positive_int(self.m, "m")
        check_positive_int(self.p, "p")
        check_positive_float(self.dt, "dt")
        check_positive_int(self.recast_stride, "recast_stride", 0)
        check_positive_float(self.theta, "theta")
        check_positive_int(self.max_rounds, "max_rounds", 0)

    def fit(self, model, y=None):
        """Build grids, gPC space, fine operators and the offline space for ``model``.

        ``model`` is a :class:`CoefficientModel` or a callable ``grid -> CoefficientModel``.
        """
        self._validate_params()
        self.grid_ = build_grids(self.n_coarse, self.n_fine_per_coarse)
        model = model(self.grid_) if callable(model) else model
        if not isinstance(model, CoefficientModel):
            raise TypeError("fit expects a CoefficientModel or a callable returning one")
        model.check(self.grid_)
        self.model_ = model
        self.gpc_ = GpcSpace(model.r, self.p)
        if self.m > self.gpc_.n_p:
            raise ValueError(f"m = {self.m} exceeds N_p = {self.gpc_.n_p}")
        self.fine_ = fine_operators(model, self.grid_, self.f)
        self.space_ = build_offline_space(self.grid_, model.abar, self.l_per_node)
        return self

    def _check_fitted(self):
        if not hasattr(self, "space_"):
            raise NotFittedError("call fit before predict")

    def predict(self, initial, times):
        """Integrate from ``initial = (mean, modes)`` (fine interior-node fields).

        Returns a list of ``(mean, modes)`` fine fields at each requested time
        (times must be positive multiples of ``dt``).
        """
        self._check_fitted()
        mean, modes = initial
        n = self.fine_.n
        mean = check_fields(mean, n, "initial mean")
        modes = check_fields(modes, n, "initial modes", self.m)
        steps = [int(round(t / self.dt)) for t in np.atleast_1d(times)]
        if any(s < 1 for s in steps) or any(abs(s * self.dt - t) > 1e-9 for s, t in zip(steps, np.atleast_1d(times))):
            raise ValueError("times must be positive multiples of dt")
        if self.online:
            integ = OnlineDyboIntegrator(self.space_, self.fine_, self.gpc_, self.dt, theta=self.theta,
                                         max_rounds=self.max_rounds, recast_stride=self.recast_stride)
            ops = self.fine_
            mean, modes = integ.project(mean, modes)
        else:
            ops = assemble_operators(self.space_, self.model_, self.grid_, fine=self.fine_)
            integ = DyboIntegrator(ops, self.gpc_, self.dt, recast_stride=self.recast_stride)
        state = init_state(mean, modes, ops, self.gpc_, self.m)
        out, done = {}, 0
        for s in sorted(set(steps)):
            state = integ.run(state, s - done)
            done = s
            out[s] = kl_fields(state, ops)
        self.integrator_ = integ
        return [out[s] for s in steps]
