"""Stochastic super-localized numerical homogenization on the unit box."""

__version__ = "0.1.0"

from .grid import ConfigurationError, GridSpec, Patch, build_hierarchy, patch  # noqa: E402
from .field import FieldLaw, FieldSample, SeedScheme, sample_field  # noqa: E402
from .slod import CoarseModel, LocalBasis, RieszError, SamplingConfig, build_model  # noqa: E402

__all__ = [
    "CoarseModel", "ConfigurationError", "FieldLaw", "FieldSample", "GridSpec", "LocalBasis",
    "Patch", "RieszError", "SamplingConfig", "SeedScheme", "build_hierarchy", "build_model",
    "patch", "sample_field", "__version__",
]
