"""Numerical laboratory for a meromorphic function with prescribed iterated-exponential growth.

Submodules: :mod:`towerscale` (extended-range reals and the gauge calculus),
:mod:`growth`, :mod:`meromap`, :mod:`cover`, :mod:`counting` and :mod:`cli`.
"""

from .errors import (
    DomainError,
    EscapeGaugeError,
    InsufficientRange,
    NoConvergence,
    PoleProximity,
    TruncationUnsafe,
)
from .towerscale import GaugeSpec, LogDepthMagnitude, iter_exp, iter_log
from .growth import GrowthModel
from .meromap import FunctionParams, PoleDatum
from .cover import MassParams

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "EscapeGaugeError",
    "FunctionParams",
    "GaugeSpec",
    "GrowthModel",
    "InsufficientRange",
    "LogDepthMagnitude",
    "MassParams",
    "NoConvergence",
    "PoleDatum",
    "PoleProximity",
    "TruncationUnsafe",
    "iter_exp",
    "iter_log",
]
