"""Entropic optimal transport on discrete measures with plug-in limit laws."""

from .errors import (
    DimensionMismatch,
    EmptySample,
    InvalidMeasure,
    NoConvergence,
    NonSymmetric,
    NotCentered,
    NotSelfTransport,
    NumericalError,
    ParseError,
    SingularSystem,
    SinkhornCLTError,
)
from .inference import (
    FunctionalSpec,
    H0Spectrum,
    InferenceReport,
    PotentialCovariance,
    cost_variance_one_sample,
    divergence_h1_variance,
    eta_marginals,
    functional_ci,
    functional_variance,
    h0_limit_sample,
    h0_limit_spectrum,
    h0_test,
    potential_covariance,
)
from .measures import DiscreteMeasure, empirical_from_sample, load_measure, save_measure
from .operators import KernelOperators, build_operators, operator_spectrum, resolvent_solve
from .sinkhorn import SinkhornSolution, sinkhorn_divergence, solve

__version__ = "0.1.0"

__all__ = [
    "DimensionMismatch", "EmptySample", "InvalidMeasure", "NoConvergence", "NonSymmetric",
    "NotCentered", "NotSelfTransport", "NumericalError", "ParseError", "SingularSystem",
    "SinkhornCLTError",
    "FunctionalSpec", "H0Spectrum", "InferenceReport", "PotentialCovariance",
    "cost_variance_one_sample", "divergence_h1_variance", "eta_marginals", "functional_ci",
    "functional_variance", "h0_limit_sample", "h0_limit_spectrum", "h0_test",
    "potential_covariance",
    "DiscreteMeasure", "empirical_from_sample", "load_measure", "save_measure",
    "KernelOperators", "build_operators", "operator_spectrum", "resolvent_solve",
    "SinkhornSolution", "sinkhorn_divergence", "solve",
]
