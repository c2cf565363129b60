"""Graph-based convolutional networks for scientific image segmentation.

A small reverse-mode autodiff core, four architecture builders that all emit
one explicit DAG format, losses, a training loop, ensembles and conformal
prediction sets.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    ConfigError,
    DimensionError,
    FormatError,
    NumericalError,
    ScinetsError,
    UndefinedObjectiveError,
    UsageError,
)
from .graph import ArchSpec, ParamStore, forward, kernel_span, param_count, validate  # noqa: E402
from .builders import (  # noqa: E402
    AutoConfig,
    MsdConfig,
    SmsConfig,
    TunetConfig,
    build,
    build_autoencoder,
    build_msdnet,
    build_smsnet,
    build_tunet,
)

__all__ = [
    "ArchSpec", "AutoConfig", "ConfigError", "DimensionError", "FormatError", "MsdConfig",
    "NumericalError", "ParamStore", "ScinetsError", "SmsConfig", "TunetConfig",
    "UndefinedObjectiveError", "UsageError", "build", "build_autoencoder", "build_msdnet",
    "build_smsnet", "build_tunet", "forward", "kernel_span", "param_count", "validate",
]
