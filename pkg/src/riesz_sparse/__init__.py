"""Simulation and numerical verification toolkit for sparse domination of
drift semimartingales and the Monte Carlo Riesz vector on the flat torus."""

from .bellman import bellman_U, bellman_V, check_derivatives, check_majorization, weak_type_experiment
from .drift import DriftMatrixProcess, refoot_Z, solve_homogeneous, solve_Z, synth_V
from .ensemble import EnsembleSpec, structural_invariants
from .errors import CensoringError, RejectedInstanceError, RejectedSelectorError, UnsupportedInstanceError
from .paths import (TimeGrid, check_diff_subordination, make_time_grid, quadratic_variation,
                    sample_brownian, stochastic_integral, synth_martingale_pair)
from .riesz_mc import conditional_average, li_functional, mc_riesz, simulate_background
from .sparse import (build_sparse, check_domination, check_sparsity, eval_sparse_operator,
                     hitting_time, maximal, phi_p, weighted_maximal_check)
from .torus import (TorusGrid, TorusGridFunction, check_bounds, eval_offgrid, flow_characteristic,
                    grad_Q, lp_norm, poisson_extend, riesz_spectral)

__version__ = "0.1.0"
