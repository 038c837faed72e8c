"""Inertial particles with Basset memory: kernels, solvers and decay envelopes."""

__version__ = "0.1.0"

from .errors import (BlowUpError, CapabilityError, DomainError, OracleFailure, OutOfDomainError,
                     StepFailure)
from .params import ParticleParams, PhysicalSetup
from .relaxation import RelaxationKernel, mittag_leffler_half, phi, psi, psi_asymptotic
from .flow import DerivedFields, DoubleGyre, FieldBounds, UniformFlow, derived_fields, estimate_bounds
from .solver import (SolverConfig, TrajectoryRecord, restart_discard_history, restart_replay_history,
                     simulate, simulate_ensemble)
from .envelope import asymptotic_bound, continuation_window, envelope_curve, sup_bound

__all__ = [
    "__version__", "BlowUpError", "CapabilityError", "DomainError", "OracleFailure", "OutOfDomainError",
    "StepFailure", "ParticleParams", "PhysicalSetup", "RelaxationKernel", "mittag_leffler_half", "phi",
    "psi", "psi_asymptotic", "DerivedFields", "DoubleGyre", "FieldBounds", "UniformFlow",
    "derived_fields", "estimate_bounds", "SolverConfig", "TrajectoryRecord", "restart_discard_history",
    "restart_replay_history", "simulate", "simulate_ensemble", "asymptotic_bound",
    "continuation_window", "envelope_curve", "sup_bound",
]
