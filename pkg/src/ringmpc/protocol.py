"""Interactive two-party kernels: Beaver multiply/AND, prefix-adder A2B,
single-bit B2A, and sign-driven ReLU on a reduced ring.

Both parties execute identical control flow; every message length is a
function of tensor shape and ring width only, never of the data, so the
communication pattern leaks nothing about the inputs.

Cost model per ReLU over S elements with window width w = k - m:
    1 AND round on S words   (generate bits; metered "Other")
    ceil(log2 w) AND rounds on 2S words each (prefix tree; "Circuit")
    1 multiply round          (bit lift to the full ring; "B2A")
    1 multiply round          (value times sign bit; "Mult")
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ring
from .dealer import ARITH, BOOL, TripleStore
from .errors import ConfigError
from .ring import BitWindow, FixedPointConfig
from .sharing import (
    ArithShareTensor,
    BinShareTensor,
    add_public,
    neg_shares,
    slice_shares,
    xor_public,
)
from .transport import (
    TAG_B2A,
    TAG_CIRCUIT,
    TAG_MULT,
    TAG_OTHER,
    Endpoint,
    pack_words,
    unpack_words,
)


@dataclass
class ProtocolSession:
    """One party's execution context: link, correlated randomness, encoding."""

    endpoint: Endpoint
    triples: TripleStore
    fxp: FixedPointConfig

    @property
    def party(self) -> int:
        return self.endpoint.party

    def __post_init__(self) -> None:
        if self.triples.party != self.endpoint.party:
            raise ConfigError("triple store and endpoint belong to different parties")


def _open_pair(session: ProtocolSession, masked_a: np.ndarray, masked_b: np.ndarray,
               width: int, xor_mode: bool) -> tuple[np.ndarray, np.ndarray]:
    """Reveal two masked tensors in a single round, packed at `width` bits."""
    count = masked_a.size
    payload = pack_words(np.concatenate([masked_a.reshape(-1), masked_b.reshape(-1)]), width)
    theirs = unpack_words(session.endpoint.exchange(payload), width, 2 * count)
    if xor_mode:
        opened = np.concatenate([masked_a.reshape(-1), masked_b.reshape(-1)]) ^ theirs
    else:
        opened = ring.add_mod(np.concatenate([masked_a.reshape(-1), masked_b.reshape(-1)]), theirs, width)
    return opened[:count].reshape(masked_a.shape), opened[count:].reshape(masked_b.shape)


def beaver_mul(session: ProtocolSession, x: ArithShareTensor, y: ArithShareTensor) -> ArithShareTensor:
    """Secret-by-secret multiply: open e = x-a and f = y-b together, then
    z = c + e*b + f*a (+ e*f on party 0), which reconstructs to x*y."""
    if x.width != y.width or x.shape != y.shape:
        raise ConfigError("beaver_mul operands must share width and shape")
    w = x.width
    a, b, c = session.triples.draw(ARITH, w, x.numel)
    a = a.reshape(x.shape)
    b = b.reshape(x.shape)
    c = c.reshape(x.shape)
    e, f = _open_pair(session, ring.sub_mod(x.data, a, w), ring.sub_mod(y.data, b, w), w, xor_mode=False)
    z = ring.add_mod(c, ring.add_mod(ring.mul_mod(e, b, w), ring.mul_mod(f, a, w), w), w)
    if session.party == 0:
        z = ring.add_mod(z, ring.mul_mod(e, f, w), w)
    return ArithShareTensor(x.party, w, z)


def beaver_and(session: ProtocolSession, x: BinShareTensor, y: BinShareTensor) -> BinShareTensor:
    """Bitwise AND of XOR-shared words; the XOR analogue of beaver_mul."""
    if x.width != y.width or x.shape != y.shape:
        raise ConfigError("beaver_and operands must share width and shape")
    w = x.width
    a, b, c = session.triples.draw(BOOL, w, x.numel)
    a = a.reshape(x.shape)
    b = b.reshape(x.shape)
    c = c.reshape(x.shape)
    e, f = _open_pair(session, x.data ^ a, y.data ^ b, w, xor_mode=True)
    z = c ^ (e & b) ^ (f & a)
    if session.party == 0:
        z = z ^ (e & f)
    return BinShareTensor(x.party, w, z)


def prefix_levels(width: int) -> int:
    """Depth of the carry prefix tree for a width-bit adder."""
    return max(1, math.ceil(math.log2(width)))


def circuit_add(session: ProtocolSession, a: BinShareTensor, b: BinShareTensor) -> BinShareTensor:
    """Add two XOR-shared tensors with a Kogge-Stone parallel-prefix adder.

    One AND round computes the generate bits, then ceil(log2 w) prefix
    levels each fuse their two AND batches (carry update and propagate
    update) into a single round on a stacked tensor.  All XORs are local.
    """
    if a.width != b.width or a.shape != b.shape:
        raise ConfigError("circuit_add operands must share width and shape")
    w = a.width
    p = BinShareTensor(a.party, w, a.data ^ b.data)
    with session.endpoint.tag(TAG_OTHER):
        g = beaver_and(session, a, b)
    carry_p = p
    carry_g = g
    with session.endpoint.tag(TAG_CIRCUIT):
        for level in range(prefix_levels(w)):
            shift = np.uint64(1 << level)
            ones = np.uint64((1 << (1 << level)) - 1) & ring.mask_of(w)
            g_shift = BinShareTensor(a.party, w, (carry_g.data << shift) & ring.mask_of(w))
            p_shift = BinShareTensor(a.party, w, (carry_p.data << shift) & ring.mask_of(w))
            # Positions below the span keep their value: propagate gets 1s
            # shifted in (public), generate gets 0s.
            p_shift = xor_public(p_shift, ones)
            lhs = BinShareTensor(a.party, w, np.stack([carry_p.data, carry_p.data]))
            rhs = BinShareTensor(a.party, w, np.stack([g_shift.data, p_shift.data]))
            both = beaver_and(session, lhs, rhs)
            carry_g = BinShareTensor(a.party, w, carry_g.data ^ both.data[0])
            carry_p = BinShareTensor(a.party, w, both.data[1])
    carries = (carry_g.data << np.uint64(1)) & ring.mask_of(w)
    return BinShareTensor(a.party, w, p.data ^ carries)


def a2b(session: ProtocolSession, x: ArithShareTensor) -> BinShareTensor:
    """Arithmetic-to-binary conversion.

    Each party XOR-shares its own additive share for free (the owner keeps
    the value, the peer holds zero), then the two sharings are summed with
    the adder circuit.
    """
    zeros = np.zeros(x.shape, dtype=np.uint64)
    mine_first = x.party == 0
    u = BinShareTensor(x.party, x.width, x.data if mine_first else zeros)
    v = BinShareTensor(x.party, x.width, zeros if mine_first else x.data)
    return circuit_add(session, u, v)


def b2a_bit(session: ProtocolSession, b: BinShareTensor, out_width: int) -> ArithShareTensor:
    """Lift an XOR-shared bit onto Z/2^out_width.

    b0 ^ b1 = b0 + b1 - 2*b0*b1, so one Beaver multiply of the two
    parties' bits (each arithmetically shared for free) does the job.
    """
    if np.any(b.data > 1):
        raise ConfigError("b2a_bit expects 0/1 words")
    with session.endpoint.tag(TAG_B2A):
        zeros = np.zeros(b.shape, dtype=np.uint64)
        mine_first = b.party == 0
        u = ArithShareTensor(b.party, out_width, b.data if mine_first else zeros)
        v = ArithShareTensor(b.party, out_width, zeros if mine_first else b.data)
        t = beaver_mul(session, u, v)
        twice_t = ring.add_mod(t.data, t.data, out_width)
        lifted = ring.sub_mod(ring.add_mod(u.data, v.data, out_width), twice_t, out_width)
    return ArithShareTensor(b.party, out_width, lifted)


def drelu(session: ProtocolSession, x: ArithShareTensor, window: BitWindow) -> ArithShareTensor:
    """Shared indicator of x >= 0, estimated on the ring of bits [m, k).

    Slicing is local; the sliced shares reconstruct to floor(x/2^m) or
    floor(x/2^m)-1 on the small ring, whose sign bit drives the result.
    Output reconstructs to 1 for non-negative x, 0 for negative (subject
    to the window's pruning semantics below 2^m).
    """
    window.check_fits(x.width)
    reduced = slice_shares(x, window)
    bits = a2b(session, reduced)
    sign = BinShareTensor(x.party, 1, ring.msb(bits.data, bits.width))
    sign_arith = b2a_bit(session, sign, x.width)
    return add_public(neg_shares(sign_arith), 1)


def relu(session: ProtocolSession, x: ArithShareTensor, window: BitWindow) -> ArithShareTensor:
    """x times its windowed sign estimate; the multiply is metered as Mult."""
    d = drelu(session, x, window)
    with session.endpoint.tag(TAG_MULT):
        return beaver_mul(session, x, d)


def relu_triple_cost(count: int, window_width: int, ring_width: int) -> dict[tuple[str, int], int]:
    """Triples one ReLU over `count` elements consumes, by (kind, width).

    The adder uses count generate-ANDs plus two fused ANDs per element per
    prefix level; the bit lift and the final multiply each take one
    arithmetic triple per element on the full ring.
    """
    levels = prefix_levels(window_width)
    return {
        (BOOL, window_width): count * (1 + 2 * levels),
        (ARITH, ring_width): 2 * count,
    }
