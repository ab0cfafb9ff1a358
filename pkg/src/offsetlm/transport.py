"""Byte-level transport: message codec, framing, channels, and accounting.

Wire conventions (little-endian throughout):

* every message is one frame: a 32-bit payload length followed by the
  payload, capped at 64 MiB;
* the payload starts with a one-byte message tag; integers are
  little-endian (token ids and counts 32-bit, session ids 64-bit), flags are
  one byte, optional fields are prefixed with a presence byte, text is a
  16-bit length plus UTF-8, and logit rows are binary32 row-major;
* a connection opens with the 5-byte preamble ``b"PRDA"`` + version.

Decoding is strict: truncation, unknown tags, non-UTF-8 text, and invariant
violations all raise :class:`MalformedPayloadError` carrying the byte offset
of the failure — a decoded message is always well-formed.

The :class:`CostLedger` attributes every frame (header included) to a
category — ``data_transfer`` for prompt shipping, ``model_transfer`` for
adapter uploads, ``inference`` for draft/commit/result traffic — and a
direction; handshake traffic is tallied separately. Token counters obey
``tokens_committed + tokens_dropped == tokens_drafted + replacements``.
"""

from __future__ import annotations

import queue
import socket
import struct
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .messages import (
    Commit,
    DraftBatch,
    GenerationResult,
    Hello,
    HelloAck,
    Message,
    ProtocolError,
    ServerGenerate,
    StartSession,
    UploadAdapter,
)

FRAME_HEADER_LEN = 4
MAX_PAYLOAD_LEN = 64 * 1024 * 1024

PREAMBLE_MAGIC = b"PRDA"
PREAMBLE_VERSION = 1
PREAMBLE = PREAMBLE_MAGIC + bytes([PREAMBLE_VERSION])

TAG_HELLO = 1
TAG_HELLO_ACK = 2
TAG_START_SESSION = 3
TAG_DRAFT_BATCH = 4
TAG_COMMIT = 5
TAG_UPLOAD_ADAPTER = 6
TAG_SERVER_GENERATE = 7
TAG_GENERATION_RESULT = 8
TAG_PROTOCOL_ERROR = 9

CLIENT_TO_SERVER = "client_to_server"
SERVER_TO_CLIENT = "server_to_client"
DIRECTIONS = (CLIENT_TO_SERVER, SERVER_TO_CLIENT)

CAT_DATA = "data_transfer"
CAT_MODEL = "model_transfer"
CAT_INFERENCE = "inference"
CAT_HANDSHAKE = "handshake"
CATEGORIES = (CAT_DATA, CAT_MODEL, CAT_INFERENCE, CAT_HANDSHAKE)


class MalformedPayloadError(ValueError):
    """A payload failed to decode; ``offset`` is the failing byte position."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class ConnectionClosedError(Exception):
    """The peer closed the channel mid-conversation."""


class FrameTooLargeError(ValueError):
    """A frame length exceeded the 64 MiB payload cap."""


class ZeroTokenResponseError(ValueError):
    """A latency probe saw a run that produced no response tokens."""


# ---------------------------------------------------------------------------
# Message codec
# ---------------------------------------------------------------------------


def _pack_tokens(tokens) -> bytes:
    return struct.pack("<I", len(tokens)) + struct.pack(f"<{len(tokens)}I", *tokens)


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ValueError("text field exceeds 16-bit length")
    return struct.pack("<H", len(raw)) + raw


def encode_message(msg: Message) -> bytes:
    """Serialize one message to its tagged payload bytes."""
    if isinstance(msg, Hello):
        return struct.pack(
            "<BIIIIQ",
            TAG_HELLO,
            msg.protocol_version,
            msg.vocab_size,
            msg.eos_id,
            msg.bos_id,
            msg.model_fingerprint,
        )
    if isinstance(msg, HelloAck):
        return struct.pack("<BB", TAG_HELLO_ACK, 1 if msg.accept else 0) + _pack_text(msg.reason)
    if isinstance(msg, StartSession):
        return (
            struct.pack("<BQ", TAG_START_SESSION, msg.session_id)
            + _pack_tokens(msg.prompt)
            + struct.pack("<II", msg.draft_len, msg.max_new_tokens)
        )
    if isinstance(msg, DraftBatch):
        n = len(msg.tokens)
        return (
            struct.pack("<BQH", TAG_DRAFT_BATCH, msg.session_id, n)
            + struct.pack(f"<{n}I", *msg.tokens)
            + np.asarray(msg.logits, dtype="<f4").tobytes(order="C")
        )
    if isinstance(msg, Commit):
        out = struct.pack("<BQI", TAG_COMMIT, msg.session_id, msg.accept_count)
        if msg.replacement is None:
            out += struct.pack("<B", 0)
        else:
            out += struct.pack("<BI", 1, msg.replacement)
        return out + struct.pack("<B", 1 if msg.done else 0)
    if isinstance(msg, UploadAdapter):
        return (
            struct.pack("<BI", TAG_UPLOAD_ADAPTER, len(msg.adapter_bytes))
            + msg.adapter_bytes
            + struct.pack("<Q", msg.base_fingerprint)
        )
    if isinstance(msg, ServerGenerate):
        return (
            struct.pack("<BQ", TAG_SERVER_GENERATE, msg.session_id)
            + _pack_tokens(msg.prompt)
            + struct.pack("<BBfQI", msg.flavor, msg.mode, msg.temperature, msg.seed, msg.max_new_tokens)
        )
    if isinstance(msg, GenerationResult):
        return struct.pack("<BQ", TAG_GENERATION_RESULT, msg.session_id) + _pack_tokens(msg.tokens)
    if isinstance(msg, ProtocolError):
        return struct.pack("<B", TAG_PROTOCOL_ERROR) + _pack_text(msg.code) + _pack_text(msg.text)
    raise TypeError(f"cannot encode object of type {type(msg).__name__}")


class _PayloadReader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def fail(self, why: str) -> MalformedPayloadError:
        return MalformedPayloadError(why, self.pos)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedPayloadError(
                f"payload truncated: needed {n} bytes, {len(self.data) - self.pos} left",
                len(self.data),
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def f32(self) -> float:
        return struct.unpack("<f", self.take(4))[0]

    def flag(self) -> bool:
        b = self.u8()
        if b not in (0, 1):
            raise MalformedPayloadError(f"flag byte must be 0 or 1, got {b}", self.pos - 1)
        return bool(b)

    def tokens(self) -> list[int]:
        n = self.u32()
        return list(struct.unpack(f"<{n}I", self.take(4 * n)))

    def text(self) -> str:
        n = self.u16()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedPayloadError(f"invalid UTF-8 text: {exc}", self.pos - n) from exc


def decode_message(data: bytes) -> Message:
    """Parse payload bytes back into a message, validating as it goes."""
    r = _PayloadReader(data)
    if len(data) == 0:
        raise r.fail("empty payload")
    tag = r.u8()
    try:
        if tag == TAG_HELLO:
            msg: Message = Hello(
                protocol_version=r.u32(),
                vocab_size=r.u32(),
                eos_id=r.u32(),
                bos_id=r.u32(),
                model_fingerprint=r.u64(),
            )
        elif tag == TAG_HELLO_ACK:
            msg = HelloAck(accept=r.flag(), reason=r.text())
        elif tag == TAG_START_SESSION:
            msg = StartSession(
                session_id=r.u64(),
                prompt=tuple(r.tokens()),
                draft_len=r.u32(),
                max_new_tokens=r.u32(),
            )
        elif tag == TAG_DRAFT_BATCH:
            session_id = r.u64()
            n = r.u16()
            if n < 1:
                raise r.fail("draft batch token count must be at least 1")
            tokens = list(struct.unpack(f"<{n}I", r.take(4 * n)))
            rest = len(data) - r.pos
            if rest == 0 or rest % (4 * n) != 0:
                raise r.fail(
                    f"draft logits block of {rest} bytes does not divide into {n} float32 rows"
                )
            vocab = rest // (4 * n)
            logits = np.frombuffer(r.take(rest), dtype="<f4").reshape(n, vocab)
            msg = DraftBatch(session_id=session_id, tokens=tuple(tokens), logits=logits)
        elif tag == TAG_COMMIT:
            session_id = r.u64()
            accept_count = r.u32()
            replacement = r.u32() if r.flag() else None
            msg = Commit(
                session_id=session_id,
                accept_count=accept_count,
                replacement=replacement,
                done=r.flag(),
            )
        elif tag == TAG_UPLOAD_ADAPTER:
            blob_len = r.u32()
            blob = r.take(blob_len)
            msg = UploadAdapter(adapter_bytes=blob, base_fingerprint=r.u64())
        elif tag == TAG_SERVER_GENERATE:
            msg = ServerGenerate(
                session_id=r.u64(),
                prompt=tuple(r.tokens()),
                flavor=r.u8(),
                mode=r.u8(),
                temperature=r.f32(),
                seed=r.u64(),
                max_new_tokens=r.u32(),
            )
        elif tag == TAG_GENERATION_RESULT:
            msg = GenerationResult(session_id=r.u64(), tokens=tuple(r.tokens()))
        elif tag == TAG_PROTOCOL_ERROR:
            msg = ProtocolError(code=r.text(), text=r.text())
        else:
            raise MalformedPayloadError(f"unknown message tag {tag}", 0)
    except struct.error as exc:  # defensive; take() should catch first
        raise r.fail(f"bad field encoding: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, MalformedPayloadError):
            raise
        raise r.fail(f"message invariant violated: {exc}") from exc
    if r.pos != len(data):
        raise r.fail(f"{len(data) - r.pos} trailing bytes after message")
    return msg


# ---------------------------------------------------------------------------
# Byte channels
# ---------------------------------------------------------------------------


class ByteChannel(ABC):
    """A reliable ordered byte stream with exact-read semantics."""

    @abstractmethod
    def send(self, data: bytes) -> None: ...

    @abstractmethod
    def recv_exact(self, n: int) -> bytes: ...

    @abstractmethod
    def close(self) -> None: ...


class QueueChannel(ByteChannel):
    """In-process duplex endpoint backed by a pair of thread-safe queues."""

    def __init__(self, send_q: queue.SimpleQueue, recv_q: queue.SimpleQueue, timeout: float = 30.0) -> None:
        self._send_q = send_q
        self._recv_q = recv_q
        self._buf = bytearray()
        self._closed = False
        self._peer_closed = False
        self._timeout = timeout

    def send(self, data: bytes) -> None:
        if self._closed:
            raise ConnectionClosedError("channel is closed")
        self._send_q.put(bytes(data))

    def recv_exact(self, n: int) -> bytes:
        while len(self._buf) < n:
            if self._peer_closed:
                raise ConnectionClosedError("peer closed the channel")
            try:
                item = self._recv_q.get(timeout=self._timeout)
            except queue.Empty as exc:
                raise ConnectionClosedError("channel receive timed out") from exc
            if item is None:
                self._peer_closed = True
            else:
                self._buf.extend(item)
        out = bytes(self._buf[:n])
        del self._buf[:n]
        return out

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._send_q.put(None)


def queue_channel_pair(timeout: float = 30.0) -> tuple[QueueChannel, QueueChannel]:
    """A connected in-process channel pair (client end, server end)."""
    ab: queue.SimpleQueue = queue.SimpleQueue()
    ba: queue.SimpleQueue = queue.SimpleQueue()
    return QueueChannel(ab, ba, timeout), QueueChannel(ba, ab, timeout)


class SocketChannel(ByteChannel):
    """Stream-socket endpoint with the same exact-read semantics."""

    def __init__(self, sock: socket.socket) -> None:
        self._sock = sock
        try:
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError:
            pass  # not a TCP socket

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise ConnectionClosedError(f"socket send failed: {exc}") from exc

    def recv_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self._sock.recv(n - len(buf))
            except OSError as exc:
                raise ConnectionClosedError(f"socket recv failed: {exc}") from exc
            if chunk == b"":
                raise ConnectionClosedError("peer closed the socket")
            buf.extend(chunk)
        return bytes(buf)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------


@dataclass
class CostLedger:
    """Monotone byte and token counters for one client/server conversation."""

    bytes_by: dict[tuple[str, str], int] = field(default_factory=dict)
    round_count: int = 0
    tokens_drafted: int = 0
    tokens_committed: int = 0
    tokens_dropped: int = 0
    replacements: int = 0

    def record_frame(self, category: str, direction: str, nbytes: int) -> None:
        if category not in CATEGORIES:
            raise ValueError(f"unknown ledger category {category!r}")
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown ledger direction {direction!r}")
        if nbytes < 0:
            raise ValueError("byte count must be non-negative")
        key = (category, direction)
        self.bytes_by[key] = self.bytes_by.get(key, 0) + nbytes

    def bytes_total(self, category: str, direction: str | None = None) -> int:
        if direction is not None:
            return self.bytes_by.get((category, direction), 0)
        return sum(self.bytes_by.get((category, d), 0) for d in DIRECTIONS)

    def note_draft(self, drafted: int) -> None:
        self.round_count += 1
        self.tokens_drafted += drafted

    def note_commit(self, accepted: int, drafted: int, replaced: bool) -> None:
        self.tokens_committed += accepted + (1 if replaced else 0)
        self.tokens_dropped += drafted - accepted
        self.replacements += 1 if replaced else 0

    def acceptance_rate(self) -> float | None:
        """Fraction of drafted tokens committed verbatim; None before any draft."""
        if self.tokens_drafted == 0:
            return None
        return (self.tokens_drafted - self.tokens_dropped) / self.tokens_drafted

    def check_token_flow(self) -> None:
        if self.tokens_committed + self.tokens_dropped != self.tokens_drafted + self.replacements:
            raise AssertionError(
                "ledger token flow violated: "
                f"committed {self.tokens_committed} + dropped {self.tokens_dropped} "
                f"!= drafted {self.tokens_drafted} + replacements {self.replacements}"
            )


def classify_message(msg: Message) -> str:
    """Ledger category for a message type."""
    if isinstance(msg, (Hello, HelloAck)):
        return CAT_HANDSHAKE
    if isinstance(msg, (StartSession, ServerGenerate)):
        return CAT_DATA
    if isinstance(msg, UploadAdapter):
        return CAT_MODEL
    return CAT_INFERENCE


def ledger_record(ledger: CostLedger, msg: Message, direction: str, category: str | None = None) -> int:
    """Attribute one message's full frame size (header included) to the ledger."""
    nbytes = FRAME_HEADER_LEN + len(encode_message(msg))
    ledger.record_frame(category or classify_message(msg), direction, nbytes)
    return nbytes


def ledger_report(ledger: CostLedger) -> str:
    """Line-delimited field=value report of byte totals and token counters."""
    lines = []
    for category in CATEGORIES:
        for direction in DIRECTIONS:
            lines.append(
                f"record=ledger_bytes category={category} direction={direction} "
                f"bytes={ledger.bytes_by.get((category, direction), 0)}"
            )
    for name in ("round_count", "tokens_drafted", "tokens_committed", "tokens_dropped", "replacements"):
        lines.append(f"record=ledger_counter name={name} value={getattr(ledger, name)}")
    rate = ledger.acceptance_rate()
    if rate is not None:
        lines.append(f"record=ledger_ratio name=acceptance_rate value={rate:.6f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Framed connections
# ---------------------------------------------------------------------------


class FramedConnection:
    """Length-prefixed message exchange over a byte channel, with accounting.

    ``side`` ("client" or "server") fixes the direction label attributed to
    sends; receives get the opposite label. The same ledger instance can be
    shared with the protocol layer for token counting.
    """

    def __init__(self, channel: ByteChannel, side: str = "client", ledger: CostLedger | None = None) -> None:
        if side not in ("client", "server"):
            raise ValueError("side must be 'client' or 'server'")
        self.channel = channel
        self.side = side
        self.ledger = ledger

    def _send_direction(self) -> str:
        return CLIENT_TO_SERVER if self.side == "client" else SERVER_TO_CLIENT

    def _recv_direction(self) -> str:
        return SERVER_TO_CLIENT if self.side == "client" else CLIENT_TO_SERVER

    def send_preamble(self) -> None:
        self.channel.send(PREAMBLE)
        if self.ledger is not None:
            self.ledger.record_frame(CAT_HANDSHAKE, self._send_direction(), len(PREAMBLE))

    def expect_preamble(self) -> None:
        raw = self.channel.recv_exact(len(PREAMBLE))
        if raw[:4] != PREAMBLE_MAGIC:
            raise MalformedPayloadError(f"bad connection magic {raw[:4]!r}", 0)
        if raw[4] != PREAMBLE_VERSION:
            raise MalformedPayloadError(f"unsupported protocol version {raw[4]}", 4)
        if self.ledger is not None:
            self.ledger.record_frame(CAT_HANDSHAKE, self._recv_direction(), len(PREAMBLE))

    def send_message(self, msg: Message) -> None:
        payload = encode_message(msg)
        if len(payload) > MAX_PAYLOAD_LEN:
            raise FrameTooLargeError(
                f"payload of {len(payload)} bytes exceeds the {MAX_PAYLOAD_LEN}-byte cap"
            )
        self.channel.send(struct.pack("<I", len(payload)) + payload)
        if self.ledger is not None:
            self.ledger.record_frame(
                classify_message(msg), self._send_direction(), FRAME_HEADER_LEN + len(payload)
            )

    def recv_message(self) -> Message:
        (length,) = struct.unpack("<I", self.channel.recv_exact(4))
        if length > MAX_PAYLOAD_LEN:
            raise FrameTooLargeError(
                f"incoming frame of {length} bytes exceeds the {MAX_PAYLOAD_LEN}-byte cap"
            )
        payload = self.channel.recv_exact(length)
        msg = decode_message(payload)
        if self.ledger is not None:
            self.ledger.record_frame(
                classify_message(msg), self._recv_direction(), FRAME_HEADER_LEN + length
            )
        return msg

    def close(self) -> None:
        self.channel.close()


# ---------------------------------------------------------------------------
# Latency probing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    """Wall-clock cost of one generation, normalized per response token."""

    total_wall_time_s: float
    response_tokens: int
    ms_per_token: float


def latency_probe(run) -> LatencyReport:
    """Time ``run()`` (a complete post-handshake generation) wall-clock.

    ``run`` must return the response token list; an empty response is an
    error because the per-token normalization would be undefined.
    """
    t0 = time.perf_counter()
    tokens = run()
    elapsed = time.perf_counter() - t0
    n = len(tokens)
    if n == 0:
        raise ZeroTokenResponseError("generation produced no response tokens")
    return LatencyReport(
        total_wall_time_s=elapsed,
        response_tokens=n,
        ms_per_token=1000.0 * elapsed / n,
    )


def latency_report(report: LatencyReport) -> str:
    return (
        f"record=latency total_wall_time_s={report.total_wall_time_s:.6f} "
        f"response_tokens={report.response_tokens} "
        f"ms_per_token={report.ms_per_token:.6f}"
    )
