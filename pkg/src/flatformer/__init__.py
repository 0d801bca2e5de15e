"""Session-aware knowledge tracing with a pre-computed forgetting bias on attention.

Subpackages: :mod:`numerics` (tensors, autodiff, optimiser), :mod:`features`
(log ingestion, sessions, batching), :mod:`model`, :mod:`evaluation`, plus
:mod:`training`, :mod:`synth` and :mod:`cli`.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, DivergenceError, FlatFormerError
from .model import FlatFormer, ModelConfig, build_variant

__all__ = [
    "ConfigError",
    "DataError",
    "DivergenceError",
    "FlatFormer",
    "FlatFormerError",
    "ModelConfig",
    "build_variant",
    "__version__",
]
