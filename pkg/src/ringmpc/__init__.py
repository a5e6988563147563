"""Two-party secret-sharing inference with reduced-ring ReLU evaluation."""

from .errors import (
    ConfigError,
    DataFormatError,
    EncodeRangeError,
    InfeasibleSearchError,
    RingMpcError,
    TransportError,
    TripleExhaustedError,
    WindowError,
)
from .ring import BitWindow, FixedPointConfig, RingElement

__version__ = "0.1.0"

__all__ = [
    "BitWindow",
    "ConfigError",
    "DataFormatError",
    "EncodeRangeError",
    "FixedPointConfig",
    "InfeasibleSearchError",
    "RingElement",
    "RingMpcError",
    "TransportError",
    "TripleExhaustedError",
    "WindowError",
    "__version__",
]
