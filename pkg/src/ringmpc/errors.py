"""Exception hierarchy shared across the engine.

Each class maps to one CLI exit code so operators can script around
failure modes: config 2, transport 3, data format 4, triple exhaustion 5.
"""


class RingMpcError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(RingMpcError):
    """Invalid configuration: bad window, width, shape, or search setup."""

    exit_code = 2


class EncodeRangeError(ConfigError):
    """Fixed-point encoding would overflow the signed ring range."""


class WindowError(ConfigError):
    """A bit window does not fit the ring it is applied to."""


class InfeasibleSearchError(ConfigError):
    """No bit assignment satisfies the search budget and threshold."""


class TransportError(RingMpcError):
    """Peer link failure: disconnect, refused connection, or framing error."""

    exit_code = 3


class DataFormatError(RingMpcError):
    """Malformed on-disk artifact: triple file, model manifest, or dataset."""

    exit_code = 4


class TripleExhaustedError(RingMpcError):
    """A protocol session asked for more correlated randomness than was dealt."""

    exit_code = 5
