"""Trusted-dealer Beaver triples for secret multiplication and bitwise AND.

The dealer runs offline: it samples (a, b, c = a*b) on the arithmetic ring
or (a, b, c = a&b) on words, splits each into two-party shares, and hands
every party its half.  Online sessions then consume triples strictly once;
reuse would let an honest-but-curious peer cancel the masks, so the store
hard-fails on exhaustion instead of recycling.

File format: magic "HBTRIP1", little-endian header (kind u8, width u8,
count u64, seed u64), then six arrays of `count` 64-bit little-endian words
in the order a0, b0, c0, a1, b1, c1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ring
from .errors import ConfigError, DataFormatError, TripleExhaustedError

MAGIC = b"HBTRIP1"
KIND_ARITH = 0
KIND_BOOL = 1
_HEADER = struct.Struct("<7sBBQQ")

ARITH = "arith"
BOOL = "bool"
_KIND_CODES = {ARITH: KIND_ARITH, BOOL: KIND_BOOL}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


@dataclass
class TripleBatch:
    """Both parties' shares of `count` correlated triples on one ring."""

    kind: str  # "arith" or "bool"
    width: int
    count: int
    seed: int
    shares: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]  # [party][a|b|c]

    def party_arrays(self, party: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.shares[party]


def _triple_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed))


def gen_arith_triples(count: int, width: int, seed: int) -> TripleBatch:
    """Additive-shared (a, b, ab mod 2^width) triples, deterministic in seed."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    rng = _triple_rng(seed)
    a = ring.random_residues(rng, count, width)
    b = ring.random_residues(rng, count, width)
    c = ring.mul_mod(a, b, width)
    r_a = ring.random_residues(rng, count, width)
    r_b = ring.random_residues(rng, count, width)
    r_c = ring.random_residues(rng, count, width)
    p0 = (ring.add_mod(a, r_a, width), ring.add_mod(b, r_b, width), ring.add_mod(c, r_c, width))
    p1 = (ring.neg_mod(r_a, width), ring.neg_mod(r_b, width), ring.neg_mod(r_c, width))
    return TripleBatch(ARITH, width, count, seed, (p0, p1))


def gen_bool_triples(count: int, word_width: int, seed: int) -> TripleBatch:
    """XOR-shared (a, b, a&b) word triples, deterministic in seed."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    rng = _triple_rng(seed)
    a = ring.random_residues(rng, count, word_width)
    b = ring.random_residues(rng, count, word_width)
    c = a & b
    r_a = ring.random_residues(rng, count, word_width)
    r_b = ring.random_residues(rng, count, word_width)
    r_c = ring.random_residues(rng, count, word_width)
    p0 = (a ^ r_a, b ^ r_b, c ^ r_c)
    p1 = (r_a, r_b, r_c)
    return TripleBatch(BOOL, word_width, count, seed, (p0, p1))


def save_triples(batch: TripleBatch, path: str | Path) -> None:
    header = _HEADER.pack(MAGIC, _KIND_CODES[batch.kind], batch.width, batch.count, batch.seed)
    with open(path, "wb") as fh:
        fh.write(header)
        for party in (0, 1):
            for arr in batch.party_arrays(party):
                fh.write(arr.astype("<u8").tobytes())


def load_triples(path: str | Path) -> TripleBatch:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read triple file: {exc}") from exc
    if len(blob) < _HEADER.size:
        raise DataFormatError(f"{path}: too short for a triple file header")
    magic, kind_code, width, count, seed = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if kind_code not in _KIND_NAMES:
        raise DataFormatError(f"{path}: unknown triple kind {kind_code}")
    if not 1 <= width <= ring.MAX_WIDTH:
        raise DataFormatError(f"{path}: invalid width {width}")
    expected = _HEADER.size + 6 * 8 * count
    if len(blob) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(blob)}")
    arrays = []
    offset = _HEADER.size
    for _ in range(6):
        arr = np.frombuffer(blob, dtype="<u8", count=count, offset=offset).copy()
        arrays.append(arr)
        offset += 8 * count
    shares = ((arrays[0], arrays[1], arrays[2]), (arrays[3], arrays[4], arrays[5]))
    return TripleBatch(_KIND_NAMES[kind_code], width, count, seed, shares)


@dataclass
class _Stream:
    a: np.ndarray
    b: np.ndarray
    c: np.ndarray
    cursor: int = 0


@dataclass
class TripleStore:
    """One party's view of the dealt triples, consumed front to back.

    A store belongs to a single protocol session; cursors only move
    forward, so no triple is ever handed out twice.
    """

    party: int
    _streams: dict[tuple[str, int], _Stream] = field(default_factory=dict)

    def add_batch(self, batch: TripleBatch) -> None:
        key = (batch.kind, batch.width)
        a, b, c = batch.party_arrays(self.party)
        if key in self._streams:
            s = self._streams[key]
            s.a = np.concatenate([s.a, a])
            s.b = np.concatenate([s.b, b])
            s.c = np.concatenate([s.c, c])
        else:
            self._streams[key] = _Stream(a.copy(), b.copy(), c.copy())

    def draw(self, kind: str, width: int, count: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Next `count` unused (a, b, c) share arrays for (kind, width)."""
        key = (kind, width)
        s = self._streams.get(key)
        if s is None or s.cursor + count > s.a.size:
            have = 0 if s is None else s.a.size - s.cursor
            raise TripleExhaustedError(
                f"party {self.party} needs {count} {kind} triples of width {width}, {have} left"
            )
        lo, hi = s.cursor, s.cursor + count
        s.cursor = hi
        return s.a[lo:hi], s.b[lo:hi], s.c[lo:hi]

    def consumed(self, kind: str, width: int) -> int:
        s = self._streams.get((kind, width))
        return 0 if s is None else s.cursor

    def remaining(self, kind: str, width: int) -> int:
        s = self._streams.get((kind, width))
        return 0 if s is None else s.a.size - s.cursor
