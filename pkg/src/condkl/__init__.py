"""Conditional Karhunen-Loeve models for diffusion with a log-normal coefficient.

Build Gaussian-process models of a partially observed log-coefficient,
reduce them to finite KL expansions (condition-then-truncate or
truncate-then-condition), propagate them through a finite-volume diffusion
solver by Monte Carlo or sparse-grid collocation, and choose new
measurement locations.
"""

__version__ = "0.1.0"

from .active_learning import (
    METHOD_1,
    METHOD_2,
    AcquisitionResult,
    Campaign,
    CampaignError,
    acquire_method1,
    acquire_method2,
    run_campaign,
)
from .conditioning import (
    ConditionalKLModel,
    FullyDeterminedField,
    condition_then_truncate,
    condition_xi,
    implied_moment_field,
    truncate_then_condition,
)
from .grid import MomentField, StructuredGrid, field_l2_norm
from .kernel_gp import (
    IllConditionedCovariance,
    KernelHyperparams,
    ObservationSet,
    fit_hyperparameters,
    gp_posterior,
    kernel_eval,
    log_marginal_likelihood,
)
from .kl_expansion import KLBasis, evaluate_field, separable_kl_basis, solve_kernel_eigenproblem
from .pde_solver import DiffusionProblem, SolverError, solve_diffusion
from .uq_propagation import collocation_moments, monte_carlo_moments, smolyak_grid

__all__ = [
    "METHOD_1",
    "METHOD_2",
    "AcquisitionResult",
    "Campaign",
    "CampaignError",
    "ConditionalKLModel",
    "DiffusionProblem",
    "FullyDeterminedField",
    "IllConditionedCovariance",
    "KLBasis",
    "KernelHyperparams",
    "MomentField",
    "ObservationSet",
    "SolverError",
    "StructuredGrid",
    "acquire_method1",
    "acquire_method2",
    "collocation_moments",
    "condition_then_truncate",
    "condition_xi",
    "evaluate_field",
    "field_l2_norm",
    "fit_hyperparameters",
    "gp_posterior",
    "implied_moment_field",
    "kernel_eval",
    "log_marginal_likelihood",
    "monte_carlo_moments",
    "run_campaign",
    "separable_kl_basis",
    "smolyak_grid",
    "solve_diffusion",
    "solve_kernel_eigenproblem",
    "truncate_then_condition",
]
