"""Treatment-effect estimation that borrows external controls.

A randomized experiment is augmented with external controls whose outcome
may be shifted by an unknown bias function.  The outcome model and the bias
function are both expanded in power-series sieves and fitted jointly with two
separately tuned SCAD penalties.
"""
__version__ = "0.1.0"

from .basis import BasisSpec, DesignMatrix, assemble_design, orthonormalize, power_basis
from .data import (Dataset, MatchSpec, load_csv, match_external_controls, pairwise_interactions,
                   save_csv, scale_unit_interval)
from .errors import (CVError, DPIEError, EstimationError, MatchError, ParseError, RankDeficiencyError,
                     SchemaError, StratumError, ValidityError)
from .estimators import (ATEResult, VarianceReport, bpp_estimate, dpie, mba_estimate, plugin_variance,
                         re_only, spie)
from .scad import FitResult, PenaltyConfig, fit_penalized_ls, refit_ols, scad_derivative, scad_value
from .simulation import (MCMetrics, Study1Spec, Study2Spec, emit_report, gen_study1, gen_study2,
                         load_report, run_monte_carlo)
from .tuning import CVPlan, CVResult, cv_select, make_folds

__all__ = [name for name in dir() if not name.startswith("_")]
