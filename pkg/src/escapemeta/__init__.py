"""Escape rates and metastable densities of interval maps with random holes.

Transfer operators are discretised by Ulam's method with exact affine
integrals; an independent Monte Carlo oracle cross-checks the spectra.
"""
__version__ = "0.1.0"

from ._backend import BACKEND, HAVE_COMPILED
from .escape import (EscapeRow, QkTable, accsm_measure, escape_sweep, extrapolate_limit, qk_terms,
                     theoretical_limit)
from .maps import (Branch, MapConstructionError, MapDomainError, PeriodAmbiguityError, PeriodInfo, PiecewiseMap,
                   affine_map, detect_period, make_doubling, make_metastable)
from .metastable import (MetastableReport, PerturbedFamily, balance_check, benchmark_family, check_B4, compute_holes,
                         corollary_ratio, lahr, open_subsystem_eigen, predicted_alpha,
                         restricted_invariant_densities, stationary_and_compare)
from .montecarlo import RngSpec, SurvivalCurve, mc_vs_spectral, simulate_stationary, simulate_survival
from .noise import (AveragedHoleMeasures, HoleFamily, NoiseModel, averaged_hole_measures, check_condition_C,
                    make_condition_C_noise, make_deterministic_noise, make_uniform_noise, symmetric_holes)
from .ulam import (DensityVector, EigenPair, Grid, UlamOperator, build_averaged_closed, build_closed, build_grid,
                   build_open, check_eigen_identity, leading_eigenpair, ly_diagnostic, variation)

__all__ = [name for name in dir() if not name.startswith("_")]
