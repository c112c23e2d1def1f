"""Adaptive temporal-difference policy evaluation with exact oracles."""

from .errors import (
    AdaTdError,
    AssumptionError,
    CertificateError,
    ConditioningError,
    ConfigError,
    NumericError,
)
from .mdp import FeatureMap, Mdp, diagnose, random_mdp, sample_chain
from .oracle import fixed_point_td0, fixed_point_td_lambda
from .learners import Hyperparams, run_learner

__version__ = "0.1.0"

__all__ = [
    "AdaTdError",
    "AssumptionError",
    "CertificateError",
    "ConditioningError",
    "ConfigError",
    "NumericError",
    "FeatureMap",
    "Mdp",
    "diagnose",
    "random_mdp",
    "sample_chain",
    "fixed_point_td0",
    "fixed_point_td_lambda",
    "Hyperparams",
    "run_learner",
]
