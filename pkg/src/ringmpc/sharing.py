"""Two-party additive (mod 2^n) and XOR secret shares of ring tensors.

Conventions:
  * party 0 holds x + r, party 1 holds -r, with r uniform on the ring
    (addition sharing), or x ^ r / r (XOR sharing).
  * public-constant addition lands on party 0 only.
  * tensors carry their own ring width; cross-width arithmetic is rejected
    so reduced-ring values cannot leak into full-ring math unnoticed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ring
from .errors import ConfigError
from .ring import BitWindow

PARTIES = (0, 1)


def _check_party(party: int) -> None:
    if party not in PARTIES:
        raise ConfigError(f"party must be 0 or 1, got {party}")


@dataclass
class ArithShareTensor:
    """One party's additive share of a tensor on Z/2^width."""

    party: int
    width: int
    data: np.ndarray  # uint64 residues, any shape

    def __post_init__(self) -> None:
        _check_party(self.party)
        ring.mask_of(self.width)
        if self.data.dtype != np.uint64:
            raise ConfigError("share data must be uint64 residues")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray, width: int | None = None) -> "ArithShareTensor":
        return ArithShareTensor(self.party, self.width if width is None else width, data)


@dataclass
class BinShareTensor:
    """One party's XOR share of a tensor of width-bit words."""

    party: int
    width: int
    data: np.ndarray  # uint64 words, any shape

    def __post_init__(self) -> None:
        _check_party(self.party)
        ring.mask_of(self.width)
        if self.data.dtype != np.uint64:
            raise ConfigError("share data must be uint64 words")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray, width: int | None = None) -> "BinShareTensor":
        return BinShareTensor(self.party, self.width if width is None else width, data)


def _check_pair(a, b) -> None:
    if a.width != b.width:
        raise ConfigError(f"width mismatch: {a.width} vs {b.width}")
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch: {a.shape} vs {b.shape}")


def share_arith(
    secret: np.ndarray, width: int, rng: np.random.Generator
) -> tuple[ArithShareTensor, ArithShareTensor]:
    """Split uint64 residues into (x + r, -r) with r uniform on the ring."""
    secret = ring.to_unsigned(secret, width)
    r = ring.random_residues(rng, secret.size, width).reshape(secret.shape)
    s0 = ring.add_mod(secret, r, width)
    s1 = ring.neg_mod(r, width)
    return ArithShareTensor(0, width, s0), ArithShareTensor(1, width, s1)


def reconstruct_arith(s0: ArithShareTensor, s1: ArithShareTensor) -> np.ndarray:
    _check_pair(s0, s1)
    return ring.add_mod(s0.data, s1.data, s0.width)


def share_binary(
    secret: np.ndarray, width: int, rng: np.random.Generator
) -> tuple[BinShareTensor, BinShareTensor]:
    """Split width-bit words into (x ^ r, r) with r uniform."""
    secret = ring.to_unsigned(secret, width)
    r = ring.random_residues(rng, secret.size, width).reshape(secret.shape)
    return BinShareTensor(0, width, secret ^ r), BinShareTensor(1, width, r)


def reconstruct_binary(s0: BinShareTensor, s1: BinShareTensor) -> np.ndarray:
    _check_pair(s0, s1)
    return s0.data ^ s1.data


def add_shares(a: ArithShareTensor, b: ArithShareTensor) -> ArithShareTensor:
    _check_pair(a, b)
    if a.party != b.party:
        raise ConfigError("cannot add shares held by different parties")
    return a.with_data(ring.add_mod(a.data, b.data, a.width))


def sub_shares(a: ArithShareTensor, b: ArithShareTensor) -> ArithShareTensor:
    _check_pair(a, b)
    if a.party != b.party:
        raise ConfigError("cannot subtract shares held by different parties")
    return a.with_data(ring.sub_mod(a.data, b.data, a.width))


def neg_shares(a: ArithShareTensor) -> ArithShareTensor:
    return a.with_data(ring.neg_mod(a.data, a.width))


def add_public(a: ArithShareTensor, c: np.ndarray | int) -> ArithShareTensor:
    """Add a public constant; only party 0 shifts its share."""
    if a.party != 0:
        return a
    c_arr = ring.to_unsigned(np.broadcast_to(np.asarray(c), a.shape), a.width)
    return a.with_data(ring.add_mod(a.data, c_arr, a.width))


def mul_public(a: ArithShareTensor, c: np.ndarray | int) -> ArithShareTensor:
    """Multiply by a public ring constant; both parties scale their shares."""
    c_arr = ring.to_unsigned(np.broadcast_to(np.asarray(c), a.shape), a.width)
    return a.with_data(ring.mul_mod(a.data, c_arr, a.width))


def xor_shares(a: BinShareTensor, b: BinShareTensor) -> BinShareTensor:
    _check_pair(a, b)
    if a.party != b.party:
        raise ConfigError("cannot xor shares held by different parties")
    return a.with_data(a.data ^ b.data)


def xor_public(a: BinShareTensor, c: np.ndarray | int) -> BinShareTensor:
    """XOR a public word in; only party 0 flips bits."""
    if a.party != 0:
        return a
    c_arr = ring.to_unsigned(np.broadcast_to(np.asarray(c), a.shape), a.width)
    return a.with_data(a.data ^ c_arr)


def slice_shares(s: ArithShareTensor, window: BitWindow) -> ArithShareTensor:
    """Locally keep bits m..k-1 of each share, moving to the (k-m)-bit ring.

    The sum of the sliced shares reconstructs either floor(x / 2^m) or
    floor(x / 2^m) - 1 on the smaller ring; the missing borrow from the
    dropped low bits accounts for the -1 case.
    """
    window.check_fits(s.width)
    return ArithShareTensor(s.party, window.width, ring.slice_mod(s.data, s.width, window))
