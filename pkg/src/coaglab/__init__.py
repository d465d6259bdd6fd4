"""Coagulation with limited aggregations: deterministic solutions and stochastic coalescents."""
from .branching import (
    ArmMeasure,
    OffspringLaw,
    Pmf,
    borel_pmf,
    convolution_power,
    criticality,
    dwass_two_ancestors,
    eta_beta,
    gw_sample_total_size,
    moment,
    offspring_from_arms,
    pgf,
    pgf_prime,
    theta,
)

__version__ = "0.1.0"
