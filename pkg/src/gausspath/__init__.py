"""Path integrals over finite sums of Gaussians, sampled by Metropolis.

Covers the one-dimensional harmonic oscillator and pure U(1) / SU(2)
gauge fields in four dimensions, with Wilson loops and static potentials.
"""
from .action import (GAUGE_SU2, GAUGE_U1, HARMONIC_OSCILLATOR, FieldCache, PhysicsModel,
                     QuadratureSpec, action_delta, action_total, lagrangian_density_average)
from .geometry import (Configuration, ConfigurationError, GaussianTerm, PeriodicDomain,
                       evaluate, evaluate_gradient, periodic_displacement, truncation_radius)
from .observables import (Histogram, ObservableSeries, coordinate_histogram,
                          field_value_histogram, fit_potential, ho_observables,
                          static_potential, wilson_loop)
from .sampler import (ChainState, ScaleStrategy, SimulationConfig, initialize,
                      metropolis_step, run_chain, run_ensemble)

__version__ = "0.1.0"

__all__ = [
    "GAUGE_SU2", "GAUGE_U1", "HARMONIC_OSCILLATOR", "FieldCache", "PhysicsModel",
    "QuadratureSpec", "action_delta", "action_total", "lagrangian_density_average",
    "Configuration", "ConfigurationError", "GaussianTerm", "PeriodicDomain", "evaluate",
    "evaluate_gradient", "periodic_displacement", "truncation_radius", "Histogram",
    "ObservableSeries", "coordinate_histogram", "field_value_histogram", "fit_potential",
    "ho_observables", "static_potential", "wilson_loop", "ChainState", "ScaleStrategy",
    "SimulationConfig", "initialize", "metropolis_step", "run_chain", "run_ensemble",
]
