"""Correlated pseudo-marginal MCMC.

Likelihood estimators driven by standard-normal auxiliary variates
(importance sampling and a Hilbert-sorted particle filter), exact,
pseudo-marginal and correlated pseudo-marginal samplers, tuning rules for the
number of particles and the correlation, and diagnostics that check the
sampler's behavior against exact-likelihood oracles.
"""

__version__ = "0.1.0"

from .auxvars import AuxBlock, AuxLayout, CorrelationParam, cn_step, sample_fresh, stream
from .diagnostics import clt_moment_checks, iact, loglik_error_samples
from .errors import (CPMError, CalibrationRangeError, CapabilityError, ChainAborted, ConfigError,
                     DataError, DegenerateEstimateError, ParameterError, UndefinedIACTError)
from .estimators import ISEstimator, PFEstimator, is_loglik, pf_loglik
from .models import GaussianREModel, HestonEulerModel, LinearGaussianSSM
from .samplers import (KernelConfig, RandomWalk, Target, build_target, cpm_step, init_state,
                       make_kernel, mh_exact_step, pm_step, run_chain)
from .theory import IF_INFINITE, arct, minimize_arct, rho_pm, rho_u, rif_qstar
from .tuning import ScalingPlan, calibrate_psi, fit_ct_curve
