"""Fixed-point encoding and local bit-window arithmetic on Z/2^n.

Every value lives on a power-of-two ring of explicit width n <= 64 and is
stored as its canonical unsigned residue in [0, 2^n).  Signed reads use the
two's-complement interpretation in [-2^(n-1), 2^(n-1)).  Widths travel with
the values so that mixing rings is a loud error instead of a silent wrap.

Array helpers operate on uint64 ndarrays holding residues of the stated
width; they are the workhorses behind the share tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EncodeRangeError, WindowError

MAX_WIDTH = 64


def mask_of(width: int) -> np.uint64:
    """All-ones mask for an n-bit ring, as a uint64 scalar."""
    if not 1 <= width <= MAX_WIDTH:
        raise ConfigError(f"ring width must be in 1..{MAX_WIDTH}, got {width}")
    return np.uint64((1 << width) - 1)


def to_unsigned(values: np.ndarray | list[int], width: int) -> np.ndarray:
    """Reduce integers (possibly negative) to canonical uint64 residues."""
    mask = mask_of(width)
    arr = np.asarray(values)
    if arr.dtype == np.uint64:
        return arr & mask
    if arr.dtype == np.int64:
        return arr.view(np.uint64) & mask
    if arr.dtype.kind in "iu":
        return arr.astype(np.int64).view(np.uint64) & mask
    # Object / big-int fallback; exact for values of any magnitude.
    flat = [int(v) & int(mask) for v in arr.reshape(-1).tolist()]
    return np.array(flat, dtype=np.uint64).reshape(arr.shape)


def to_signed(values: np.ndarray, width: int) -> np.ndarray:
    """Two's-complement read of uint64 residues, as int64."""
    mask_of(width)  # validate
    shift = np.uint64(MAX_WIDTH - width)
    return (values << shift).view(np.int64) >> np.int64(MAX_WIDTH - width)


def add_mod(a: np.ndarray, b: np.ndarray, width: int) -> np.ndarray:
    return (a + b) & mask_of(width)


def sub_mod(a: np.ndarray, b: np.ndarray, width: int) -> np.ndarray:
    return (a - b) & mask_of(width)


def neg_mod(a: np.ndarray, width: int) -> np.ndarray:
    return (~a + np.uint64(1)) & mask_of(width)


def mul_mod(a: np.ndarray, b: np.ndarray, width: int) -> np.ndarray:
    return (a * b) & mask_of(width)


def slice_mod(values: np.ndarray, width: int, window: "BitWindow") -> np.ndarray:
    """Keep bits m..k-1 of each residue, reinterpreted on the (k-m)-bit ring."""
    window.check_fits(width)
    return (values >> np.uint64(window.m)) & mask_of(window.width)


def msb(values: np.ndarray, width: int) -> np.ndarray:
    """Sign bit (bit width-1) of each residue, as uint64 0/1."""
    return (values >> np.uint64(width - 1)) & np.uint64(1)


@dataclass(frozen=True)
class FixedPointConfig:
    """Encoding parameters: N-bit ring, f fractional bits, scale D = 2^f."""

    ring_bits: int = 64
    frac_bits: int = 16

    def __post_init__(self) -> None:
        if not 1 <= self.ring_bits <= MAX_WIDTH:
            raise ConfigError(f"ring_bits must be in 1..{MAX_WIDTH}")
        if not 0 < self.frac_bits < self.ring_bits:
            raise ConfigError("frac_bits must satisfy 0 < f < ring_bits")

    @property
    def scale(self) -> int:
        return 1 << self.frac_bits

    def to_json(self) -> dict:
        return {"ring_bits": self.ring_bits, "frac_bits": self.frac_bits}

    @classmethod
    def from_json(cls, obj: dict) -> "FixedPointConfig":
        return cls(ring_bits=int(obj["ring_bits"]), frac_bits=int(obj["frac_bits"]))


@dataclass(frozen=True)
class BitWindow:
    """Retained bit range [m, k): k is exclusive, m inclusive.

    Minimum usable width is 2; a 1-bit signed ring has no room for a sign
    plus a magnitude, so sign estimation on it is meaningless.
    """

    k: int
    m: int

    def __post_init__(self) -> None:
        if not 0 <= self.m < self.k <= MAX_WIDTH:
            raise WindowError(f"need 0 <= m < k <= {MAX_WIDTH}, got (k={self.k}, m={self.m})")
        if self.k - self.m < 2:
            raise WindowError(f"window width must be >= 2, got (k={self.k}, m={self.m})")

    @property
    def width(self) -> int:
        return self.k - self.m

    def check_fits(self, ring_width: int) -> None:
        if self.k > ring_width:
            raise WindowError(f"window (k={self.k}, m={self.m}) exceeds ring width {ring_width}")

    def to_json(self) -> dict:
        return {"k": self.k, "m": self.m}

    @classmethod
    def from_json(cls, obj: dict) -> "BitWindow":
        return cls(k=int(obj["k"]), m=int(obj["m"]))


@dataclass(frozen=True)
class RingElement:
    """A single value on Z/2^width, stored as its unsigned residue."""

    value: int
    width: int

    def __post_init__(self) -> None:
        mask_of(self.width)
        if not 0 <= self.value < (1 << self.width):
            object.__setattr__(self, "value", self.value & ((1 << self.width) - 1))

    @classmethod
    def from_signed(cls, value: int, width: int) -> "RingElement":
        return cls(value & ((1 << width) - 1), width)

    @property
    def signed(self) -> int:
        half = 1 << (self.width - 1)
        return self.value - (1 << self.width) if self.value >= half else self.value


def encode_fixed(x_f: float, cfg: FixedPointConfig) -> RingElement:
    """Round x_f * 2^f half away from zero onto the N-bit ring.

    Raises EncodeRangeError when the result would leave the signed range.
    """
    scaled = x_f * cfg.scale
    rounded = int(math.floor(abs(scaled) + 0.5))
    if scaled < 0:
        rounded = -rounded
    half = 1 << (cfg.ring_bits - 1)
    if abs(rounded) >= half:
        raise EncodeRangeError(f"{x_f!r} does not fit an {cfg.ring_bits}-bit ring with f={cfg.frac_bits}")
    return RingElement.from_signed(rounded, cfg.ring_bits)


def decode_fixed(e: RingElement, cfg: FixedPointConfig) -> float:
    if e.width != cfg.ring_bits:
        raise ConfigError(f"element width {e.width} != ring_bits {cfg.ring_bits}")
    return e.signed / cfg.scale


def slice_bits(e: RingElement, window: BitWindow) -> RingElement:
    """Bits m..k-1 of e as an element of the smaller (k-m)-bit ring."""
    window.check_fits(e.width)
    return RingElement((e.value >> window.m) & ((1 << window.width) - 1), window.width)


def sign_bit(e: RingElement) -> int:
    return (e.value >> (e.width - 1)) & 1


def encode_array(x_f: np.ndarray, cfg: FixedPointConfig) -> np.ndarray:
    """Vectorized encode_fixed; returns uint64 residues of shape x_f.shape."""
    x = np.asarray(x_f, dtype=np.float64)
    scaled = x * float(cfg.scale)
    rounded = np.copysign(np.floor(np.abs(scaled) + 0.5), scaled)
    half = float(1 << (cfg.ring_bits - 1))
    if np.any(np.abs(rounded) >= half):
        raise EncodeRangeError(f"input exceeds the signed range of a {cfg.ring_bits}-bit ring")
    return to_unsigned(rounded.astype(np.int64), cfg.ring_bits)


def decode_array(values: np.ndarray, cfg: FixedPointConfig) -> np.ndarray:
    """Vectorized decode_fixed; returns float64."""
    return to_signed(values, cfg.ring_bits).astype(np.float64) / float(cfg.scale)


def random_residues(rng: np.random.Generator, count: int, width: int) -> np.ndarray:
    """`count` uniform residues on Z/2^width, deterministic in the generator state."""
    mask = mask_of(width)
    if count == 0:
        return np.empty(0, dtype=np.uint64)
    words = np.frombuffer(rng.bytes(8 * count), dtype="<u8").copy()
    return words & mask
