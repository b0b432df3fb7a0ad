"""DyBO-GMsFEM: dynamically bi-orthogonal gPC with generalized multiscale finite elements.

Solves ``u_t = div(a grad u) + f`` on the unit square with homogeneous
Dirichlet data and a random coefficient ``a = abar + sum_i a_i xi_i``. The
solution is carried in truncated KL form; the spatial factors live in a
GMsFEM offline space that can be enriched online from local residuals.
"""

__version__ = "0.1.0"

from .grid import GridPair, build_grids, neighborhood  # noqa: E402
from .gpc import GpcSpace, moment_tensors, multi_index_set  # noqa: E402
from .media import CoefficientModel, high_contrast_mean, raster_import, trig_field  # noqa: E402
from .msbasis import OfflineSpace, build_offline_space, partition_of_unity  # noqa: E402
from .dybo import DyboIntegrator, DyboState, assemble_operators, fine_operators, init_state  # noqa: E402
from .online import OnlineDyboIntegrator, enrich  # noqa: E402
from .estimator import DyboGMsFEM  # noqa: E402
from .oracle import error_l2, gpc_galerkin_solve, kl_extract  # noqa: E402

__all__ = [
    "GridPair", "build_grids", "neighborhood",
    "GpcSpace", "moment_tensors", "multi_index_set",
    "CoefficientModel", "high_contrast_mean", "raster_import", "trig_field",
    "OfflineSpace", "build_offline_space", "partition_of_unity",
    "DyboIntegrator", "DyboState", "assemble_operators", "fine_operators", "init_state",
    "OnlineDyboIntegrator", "enrich", "DyboGMsFEM",
    "error_l2", "gpc_galerkin_solve", "kl_extract",
]
