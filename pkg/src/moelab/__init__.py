"""moelab: desk-scale hierarchical sparse mixture-of-experts routing lab.

A scene-level gate narrows an expert bank to a candidate pool, a per-query
gate picks top-K experts inside it, and the package wraps that block with a
synthetic training harness, ablation variants, compute accounting, and
routing diagnostics, all on a minimal reverse-mode tape with a
finite-difference gradient oracle.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    InputError,
    MoelabError,
    OracleError,
    ParameterError,
    RoutingDegeneracyError,
    TraceFormatError,
)
from .losses import LossConfig
from .routing import MoEConfig, RouterParams, RoutingTrace
from .synthetic import TaskConfig, TrainerConfig

__all__ = [
    "__version__",
    "MoelabError",
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "InputError",
    "OracleError",
    "ParameterError",
    "RoutingDegeneracyError",
    "TraceFormatError",
    "MoEConfig",
    "RouterParams",
    "RoutingTrace",
    "LossConfig",
    "TaskConfig",
    "TrainerConfig",
]
