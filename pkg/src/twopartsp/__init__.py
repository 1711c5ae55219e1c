"""Two-part mixed models with patient-specific stochastic processes."""

from .covariance import CovarianceBlocks, build_blocks, check_psd
from .estimate import FitOptions, FitResult, fit, lr_test, observed_information
from .exceptions import (ConfigError, DomainError, IdentifiabilityError,
                         InputError, ShapeError, TwoPartError,
                         UnsupportedFamilyError)
from .likelihood import (loglik_overall_re, loglik_patient,
                         loglik_patient_reduced, loglik_total)
from .model import (ContinuousDist, IdentityTransform, ModelSpec,
                    ParameterVector, Parameterization, PatientRecord,
                    ProcessFamily, TableTransform, free_parameter_names,
                    make_params, n_free_parameters, pack, unpack)
from .mvn import MvnProblem, cdf, identity_residual, log_density, mvn_cdf
from .oracle import OracleConfig, OracleMethod, oracle_loglik
from .simulate import CovariateKind, CovariateSpec, SimDesign, simulate

__version__ = "0.1.0"
