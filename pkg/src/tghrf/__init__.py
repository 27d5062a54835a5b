"""
Tukey g-and-h random fields: simulation, full, low-rank and local
likelihood fitting, regression S-BLUE, l-moment matching and clustering
of the resulting moment surfaces.
"""

__version__ = "0.1.0"

from .clustering import ClusterResult, kmeans, select_k, separation_D, standardize
from .errors import (ConditioningError, CsvFormatError, DecompositionError, DomainError,
                     FitError, InputError, MetricError, NumericError, StateError, TghError)
from .field import FieldFrame, GridSpec, Site, knn, mst_max_edge
from .full import TghRfModel, fit_full, tgh_rf_loglik
from .kernels import (EigenBasis, ExpKernelParams, cov_matrix, cross_cov, exact_eigs,
                      kernel_value, nystrom_eigs, robust_variogram_wls)
from .lmoments import LMoments, lmoment_match, sample_lmoments
from .lowrank import LowRankSpec, fit_lowrank, lowrank_loglik, make_lowrank_spec
from .sblue import SblueModel, boxcox_fit_transform, gls_fit, sblue_predict
from .simgen import SimConfig, replicate_experiment, simulate_tgh_field
from .sparse import (fit_local_tgh, fit_sparse_field, gp_local_predict, greedy_local_design,
                     local_state_extend, local_state_init, mspe_reduction)
from .tgh import TghParams, tau_gh, tau_gh_deriv, tau_gh_inv, tgh_population_lmoments
