"""Weakly asymmetric exclusion on the discrete torus: simulation, hydrodynamics and actions."""

__version__ = "0.1.0"

from .lattice import (Configuration, TorusGeometry, coarse_grain, empirical_density,
                      pair_density, swap)
from .fields import FieldSpec, Perturbation, field_from_preset
from .simulator import Trajectory, WasepSimulator, girsanov_log_weight, simulate
from .currents import (DiscreteVectorField, FourierCurrent, beckmann_flow, continuity_residual,
                       integrated_current, level_two_measure, net_flow, periodize,
                       sobolev_norm, time_averaged_pair)
from .hydro import (DensityField, DensityPath, evolve, fermi_profile, find_periodic_solution,
                    l1_contraction_rate, poincare_map)
from .action import (action, convex_hull_gap, dual_functional, fisher_functional,
                     holonomic_rate, w_hat)
from .phase import TravelingWave, constant_profile_rate, minimize_tw, phase_scan, tw_rate
from .coupling import DriftField, coupling_tail_fit, feynman_kac_check, simulate_coupled

__all__ = [
    "__version__",
    "TorusGeometry", "Configuration", "swap", "empirical_density", "pair_density",
    "coarse_grain",
    "FieldSpec", "Perturbation", "field_from_preset",
    "Trajectory", "WasepSimulator", "simulate", "girsanov_log_weight",
    "DiscreteVectorField", "net_flow", "integrated_current", "beckmann_flow", "periodize",
    "continuity_residual", "FourierCurrent", "sobolev_norm", "time_averaged_pair",
    "level_two_measure",
    "DensityField", "DensityPath", "evolve", "poincare_map", "find_periodic_solution",
    "l1_contraction_rate", "fermi_profile",
    "action", "dual_functional", "w_hat", "holonomic_rate", "fisher_functional",
    "convex_hull_gap",
    "TravelingWave", "constant_profile_rate", "tw_rate", "minimize_tw", "phase_scan",
    "DriftField", "simulate_coupled", "coupling_tail_fit", "feynman_kac_check",
]
