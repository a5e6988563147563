"""Party-to-party messaging with round counting and tagged byte metering.

One round is one `exchange` call: both parties hand over a payload and
receive the peer's, so a simultaneous bidirectional swap counts once.
Bytes accrue to whatever tag is active on the endpoint's meter; anything
sent outside a tag scope lands in "Other".

Sub-64-bit values travel packed: the low w bits of each value are
concatenated LSB-first into consecutive 64-bit little-endian words, the
final word zero-padded.  With w = 64 packing is the identity layout.
"""

from __future__ import annotations

import queue
import socket
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TransportError

TAG_CIRCUIT = "Circuit"
TAG_MULT = "Mult"
TAG_B2A = "B2A"
TAG_OTHER = "Other"
TAGS = (TAG_CIRCUIT, TAG_MULT, TAG_B2A, TAG_OTHER)


def pack_words(values: np.ndarray, w: int) -> bytes:
    """Pack the low w bits of each value into 64-bit LE words, LSB-first."""
    if not 1 <= w <= 64:
        raise ConfigError(f"pack width must be in 1..64, got {w}")
    values = np.ascontiguousarray(values, dtype=np.uint64)
    n = values.size
    n_words = (n * w + 63) // 64
    if n == 0:
        return b""
    if w == 64:
        return values.astype("<u8").tobytes()
    le = np.ascontiguousarray(values.astype("<u8"))
    bits = np.unpackbits(le.view(np.uint8).reshape(n, 8), axis=1, bitorder="little")
    stream = bits[:, :w].reshape(-1)
    padded = np.zeros(n_words * 64, dtype=np.uint8)
    padded[: stream.size] = stream
    return np.packbits(padded, bitorder="little").tobytes()


def unpack_words(data: bytes, w: int, count: int) -> np.ndarray:
    """Exact inverse of pack_words; returns `count` uint64 values."""
    if not 1 <= w <= 64:
        raise ConfigError(f"pack width must be in 1..64, got {w}")
    n_words = (count * w + 63) // 64
    if len(data) != 8 * n_words:
        raise TransportError(f"packed payload is {len(data)} bytes, expected {8 * n_words}")
    if count == 0:
        return np.empty(0, dtype=np.uint64)
    if w == 64:
        return np.frombuffer(data, dtype="<u8").copy()
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
    stream = bits[: count * w].reshape(count, w)
    full = np.zeros((count, 64), dtype=np.uint8)
    full[:, :w] = stream
    return np.ascontiguousarray(np.packbits(full, axis=1, bitorder="little")).view("<u8").reshape(count)


def packed_nbytes(count: int, w: int) -> int:
    return 8 * ((count * w + 63) // 64)


@dataclass
class Meter:
    """Per-session ledger of bytes sent and rounds, keyed by tag."""

    bytes_sent: dict[str, int] = field(default_factory=lambda: {t: 0 for t in TAGS})
    rounds: dict[str, int] = field(default_factory=lambda: {t: 0 for t in TAGS})
    trace: list[tuple[str, int]] = field(default_factory=list)
    _tag_stack: list[str] = field(default_factory=list)

    @property
    def active_tag(self) -> str:
        return self._tag_stack[-1] if self._tag_stack else TAG_OTHER

    def record(self, nbytes: int) -> None:
        tag = self.active_tag
        self.bytes_sent[tag] += nbytes
        self.rounds[tag] += 1
        self.trace.append((tag, nbytes))

    @contextmanager
    def tag(self, name: str):
        if name not in TAGS:
            raise ConfigError(f"unknown meter tag {name!r}")
        self._tag_stack.append(name)
        try:
            yield
        finally:
            self._tag_stack.pop()

    def total_bytes(self) -> int:
        return sum(self.bytes_sent.values())

    def total_rounds(self) -> int:
        return sum(self.rounds.values())

    def to_json(self) -> dict:
        return {
            "tags": {t: {"bytes": self.bytes_sent[t], "rounds": self.rounds[t]} for t in TAGS},
            "total": {"bytes": self.total_bytes(), "rounds": self.total_rounds()},
        }

    def snapshot(self) -> dict[str, tuple[int, int]]:
        return {t: (self.bytes_sent[t], self.rounds[t]) for t in TAGS}


class Endpoint:
    """Base class: FIFO link to the peer plus a meter."""

    def __init__(self, party: int):
        self.party = party
        self.meter = Meter()

    def tag(self, name: str):
        return self.meter.tag(name)

    def exchange(self, payload: bytes) -> bytes:
        self._send(payload)
        received = self._recv()
        self.meter.record(len(payload))
        return received

    def _send(self, payload: bytes) -> None:
        raise NotImplementedError

    def _recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


def with_tag(ep: Endpoint, name: str, body):
    """Run body() with all exchanges metered under `name`."""
    with ep.tag(name):
        return body()


_CLOSED = object()


class LocalEndpoint(Endpoint):
    """In-process endpoint; two of them share a pair of FIFO queues."""

    def __init__(self, party: int, inbox: queue.Queue, outbox: queue.Queue):
        super().__init__(party)
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def _send(self, payload: bytes) -> None:
        if self._closed:
            raise TransportError("endpoint is closed")
        self._outbox.put(payload)

    def _recv(self) -> bytes:
        msg = self._inbox.get()
        if msg is _CLOSED:
            raise TransportError("peer closed the link")
        return msg

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(_CLOSED)


def local_pair() -> tuple[LocalEndpoint, LocalEndpoint]:
    q01: queue.Queue = queue.Queue()
    q10: queue.Queue = queue.Queue()
    return LocalEndpoint(0, q10, q01), LocalEndpoint(1, q01, q10)


class TcpEndpoint(Endpoint):
    """TCP endpoint; frames are a 4-byte little-endian length then payload.

    Party 0 writes first and then reads, party 1 the reverse, so a swap of
    arbitrarily large payloads cannot deadlock on full socket buffers.
    """

    def __init__(self, party: int, sock: socket.socket):
        super().__init__(party)
        self._sock = sock
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def exchange(self, payload: bytes) -> bytes:
        try:
            if self.party == 0:
                self._write_frame(payload)
                received = self._read_frame()
            else:
                received = self._read_frame()
                self._write_frame(payload)
        except OSError as exc:
            raise TransportError(f"peer link failed: {exc}") from exc
        self.meter.record(len(payload))
        return received

    def _write_frame(self, payload: bytes) -> None:
        self._sock.sendall(struct.pack("<I", len(payload)) + payload)

    def _read_frame(self) -> bytes:
        header = self._read_exact(4)
        (length,) = struct.unpack("<I", header)
        return self._read_exact(length)

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            chunk = self._sock.recv(min(remaining, 1 << 20))
            if not chunk:
                raise TransportError("peer disconnected mid-frame")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(host: str, port: int, timeout: float = 30.0) -> TcpEndpoint:
    """Party 0 waits for the peer to connect."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        srv.bind((host, port))
        srv.listen(1)
        srv.settimeout(timeout)
        conn, _ = srv.accept()
    except OSError as exc:
        srv.close()
        raise TransportError(f"listen on {host}:{port} failed: {exc}") from exc
    srv.close()
    conn.settimeout(timeout)
    return TcpEndpoint(0, conn)


def tcp_connect(host: str, port: int, timeout: float = 30.0, retries: int = 50) -> TcpEndpoint:
    """Party 1 dials party 0, retrying briefly while the listener comes up."""
    import time

    last: OSError | None = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=timeout)
            sock.settimeout(timeout)
            return TcpEndpoint(1, sock)
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    raise TransportError(f"connect to {host}:{port} failed: {last}")


def run_parties(fn0, fn1, endpoints: tuple[Endpoint, Endpoint] | None = None):
    """Run both party callables on two threads and return their results.

    If one party raises, the endpoints are closed to unblock the peer and
    the first failure (by party order) is re-raised.
    """
    results: list = [None, None]
    errors: list = [None, None]

    def runner(idx: int, fn) -> None:
        try:
            results[idx] = fn()
        except BaseException as exc:  # propagate to the caller thread
            errors[idx] = exc
            if endpoints is not None:
                for ep in endpoints:
                    ep.close()

    threads = [
        threading.Thread(target=runner, args=(0, fn0), name="party-0"),
        threading.Thread(target=runner, args=(1, fn1), name="party-1"),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    raised = [e for e in errors if e is not None]
    if raised:
        # Closing the link makes the peer fail too; surface the root cause.
        primary = [e for e in raised if not isinstance(e, TransportError)]
        raise (primary or raised)[0]
    return results[0], results[1]
