"""Numerical laboratory for parameterized iterated function systems with
overlaps and fiberwise-unipotent skew-products.

Modules
-------
symbolic        words, shifts, sequence metric, cylinder strata
affine_ifs      parameterized affine contractions and their coding maps
skewprod        fiber systems, eigenvalue products, distortion checks, the planar blender
thermo          pressure, similarity dimension, Gibbs cylinder weights
transversality  near-collision scans, stratified bounds, the density integral
measure_lab     pushforward measures, lower densities, cover measures, parameter scans
jets            jet index sets, jet transport and induced jet systems
cli             the ``blenderlab`` command
"""

from .errors import (
    CapabilityError,
    ConfigError,
    ContractError,
    DomainError,
    InvariantViolation,
    LabError,
    NumericError,
    PrecisionError,
    ResourceCapError,
)

__version__ = "0.1.0"

__all__ = [
    "CapabilityError",
    "ConfigError",
    "ContractError",
    "DomainError",
    "InvariantViolation",
    "LabError",
    "NumericError",
    "PrecisionError",
    "ResourceCapError",
]
