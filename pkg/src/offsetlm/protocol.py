"""The draft/verify adaptation protocol over framed channels.

Roles
-----

The **server** owns the black-box generator. Per session it keeps one
canonical token sequence (prompt plus committed tokens) and, each round,
greedily drafts up to ``draft_len`` tokens ahead, returning them together
with their logit rows. Commits that accept only a prefix simply truncate
the speculated suffix away — the canonical sequence is the only state, so
rollback is exact by construction.

The **client** owns the proxy pair (base + adapter). For each draft batch it
recomputes proxy logits at every drafted position in one batched call,
applies the tuning offset to the black-box logit rows, samples, and accepts
the longest prefix on which its samples agree with the draft; the first
disagreement is replaced with the client's own token and the rest of the
draft is dropped. The client mirrors the canonical sequence locally and the
final result echoed by the server must match that mirror exactly.

``run_per_token`` is literally ``run_speculative`` with a draft length of
one. ``run_transfer`` instead uploads the serialized adapter once and asks
the server to run the whole offset-adapted generation locally; with the same
models, adapter, and config it returns the identical token sequence (both
paths consume one RNG draw per committed token).
"""

from __future__ import annotations

import itertools
import logging
import socket
import threading
from dataclasses import dataclass, field

import numpy as np

from .core import (
    GREEDY,
    STOCHASTIC,
    GenerationConfig,
    Vocab,
    argmax_sample,
    make_rng,
    sample_token,
)
from .lora import AdapterFormatError, LoraAdapter, apply_adapter, decode_adapter, encode_adapter
from .models import LogitModel, TinyNeuralLM
from .messages import (
    FLAVOR_ADAPTED,
    FLAVOR_BLACKBOX,
    MODE_GREEDY,
    MODE_STOCHASTIC,
    PROTOCOL_VERSION,
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
from .offset import OffsetTriple, adapted_next_token
from .transport import (
    ConnectionClosedError,
    CostLedger,
    FramedConnection,
    FrameTooLargeError,
    MalformedPayloadError,
    QueueChannel,
    SocketChannel,
    queue_channel_pair,
)

log = logging.getLogger(__name__)

ERR_SESSION_UNKNOWN = "session-unknown"
ERR_INVALID_COMMIT = "invalid-commit"
ERR_OUT_OF_SYNC = "out-of-sync"
ERR_BUDGET_EXHAUSTED = "budget-exhausted"
ERR_FINGERPRINT_MISMATCH = "fingerprint-mismatch"
ERR_MALFORMED_ADAPTER = "malformed-adapter"
ERR_UNSUPPORTED = "unsupported-request"
ERR_INVALID_PROMPT = "invalid-prompt"
ERR_MALFORMED = "malformed-payload"


class HandshakeRejectedError(Exception):
    """The server refused the Hello (vocabulary geometry mismatch)."""


class OutOfSyncError(Exception):
    """Client mirror and server canonical sequence disagree."""


class InvalidCommitError(ValueError):
    """A commit was inconsistent with the outstanding draft."""


class BudgetExhaustedError(ValueError):
    """A draft was requested with no token budget left."""


class UnknownSessionError(KeyError):
    """A message referenced a session id the server does not know."""


class RemoteProtocolError(Exception):
    """The peer answered with a ProtocolError message."""

    def __init__(self, code: str, text: str = "") -> None:
        super().__init__(f"{code}: {text}" if text else code)
        self.code = code
        self.text = text


class FingerprintMismatchError(RemoteProtocolError):
    """Server-side base proxy does not match the client's adapter base."""


def _raise_remote(err: ProtocolError) -> None:
    if err.code == ERR_FINGERPRINT_MISMATCH:
        raise FingerprintMismatchError(err.code, err.text)
    raise RemoteProtocolError(err.code, err.text)


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


@dataclass
class ServerSession:
    """Canonical sequence plus draft bookkeeping for one generation."""

    session_id: int
    vocab: Vocab
    prompt: tuple[int, ...]
    draft_len: int
    max_new_tokens: int
    canonical: list[int] = field(default_factory=list)
    tokens_generated: int = 0
    last_draft: list[int] | None = None
    done: bool = False

    def __post_init__(self) -> None:
        self.canonical = list(self.prompt)
        if self.max_new_tokens == 0:
            self.done = True
        if self.prompt and self.prompt[-1] == self.vocab.eos_id:
            self.done = True

    def budget_left(self) -> int:
        return self.max_new_tokens - self.tokens_generated

    def response_tokens(self) -> tuple[int, ...]:
        return tuple(self.canonical[len(self.prompt):])

    def draft(self, blackbox: LogitModel) -> DraftBatch:
        """Greedy autoregressive speculation from the canonical sequence."""
        if self.done or self.budget_left() <= 0:
            raise BudgetExhaustedError(
                f"session {self.session_id} has no token budget left"
            )
        if self.last_draft is not None:
            raise InvalidCommitError("previous draft has not been committed yet")
        steps = min(self.draft_len, self.budget_left())
        ctx = list(self.canonical)
        tokens: list[int] = []
        rows: list[np.ndarray] = []
        for _ in range(steps):
            z = blackbox.next_logits(ctx)
            tok = argmax_sample(z)
            tokens.append(tok)
            rows.append(z)
            ctx.append(tok)
            if tok == self.vocab.eos_id:
                break
        self.last_draft = tokens
        return DraftBatch(session_id=self.session_id, tokens=tuple(tokens), logits=np.stack(rows))

    def apply_commit(self, commit: Commit) -> None:
        """Advance the canonical sequence; speculated suffix is dropped."""
        if self.last_draft is None:
            raise InvalidCommitError("no draft outstanding")
        drafted = self.last_draft
        n = len(drafted)
        if commit.accept_count > n:
            raise InvalidCommitError(
                f"accept_count {commit.accept_count} exceeds drafted count {n}"
            )
        if commit.replacement is not None and commit.accept_count >= n:
            raise InvalidCommitError("replacement present on a full accept")
        if commit.replacement is None and commit.accept_count < n:
            raise InvalidCommitError("partial accept without a replacement token")
        if commit.replacement is not None and not 0 <= commit.replacement < self.vocab.size:
            raise InvalidCommitError(f"replacement token {commit.replacement} out of vocab")
        self.canonical.extend(drafted[: commit.accept_count])
        if commit.replacement is not None:
            self.canonical.append(commit.replacement)
        self.tokens_generated += commit.accept_count + (1 if commit.replacement is not None else 0)
        self.last_draft = None
        done_now = (
            self.tokens_generated >= self.max_new_tokens
            or (self.tokens_generated > 0 and self.canonical[-1] == self.vocab.eos_id)
        )
        if bool(commit.done) != done_now:
            raise OutOfSyncError(
                f"client done={commit.done} disagrees with server done={done_now}"
            )
        self.done = done_now


class _ConnectionState:
    """Per-connection server state: live sessions and the installed adapter.

    Scoping sessions to the connection lets independent clients number
    their sessions however they like without colliding on the server.
    """

    def __init__(self) -> None:
        self.adapted_proxy = None
        self.sessions: dict[int, ServerSession] = {}


class Server:
    """Owns the black-box model and, optionally, a copy of the base proxy.

    The models are immutable snapshots, so one server instance can serve
    any number of connections concurrently; all mutable state lives in the
    per-connection :class:`_ConnectionState`.
    """

    def __init__(self, blackbox: LogitModel, base_proxy: TinyNeuralLM | None = None) -> None:
        if base_proxy is not None and base_proxy.vocab != blackbox.vocab:
            raise ValueError("black-box and base proxy must share a vocabulary")
        self.blackbox = blackbox
        self.base_proxy = base_proxy

    @property
    def vocab(self) -> Vocab:
        return self.blackbox.vocab

    def check_hello(self, hello: Hello) -> HelloAck:
        """Accept iff the vocabulary geometry matches; prints are informational."""
        v = self.vocab
        if hello.protocol_version != PROTOCOL_VERSION:
            return HelloAck(False, f"unsupported protocol version {hello.protocol_version}")
        if (hello.vocab_size, hello.eos_id, hello.bos_id) != (v.size, v.eos_id, v.bos_id):
            return HelloAck(
                False,
                f"vocab mismatch: client ({hello.vocab_size}, eos={hello.eos_id}, "
                f"bos={hello.bos_id}) vs server ({v.size}, eos={v.eos_id}, bos={v.bos_id})",
            )
        log.debug("handshake: client proxy fingerprint %016x", hello.model_fingerprint)
        return HelloAck(True, "")

    # -- per-connection state machine ---------------------------------------

    def serve_connection(self, conn: FramedConnection) -> None:
        """Run one connection to completion (blocking)."""
        try:
            conn.expect_preamble()
            first = conn.recv_message()
        except (ConnectionClosedError, MalformedPayloadError, FrameTooLargeError):
            conn.close()
            return
        if not isinstance(first, Hello):
            conn.send_message(ProtocolError(ERR_UNSUPPORTED, "expected Hello"))
            conn.close()
            return
        ack = self.check_hello(first)
        conn.send_message(ack)
        if not ack.accept:
            conn.close()
            return

        state = _ConnectionState()
        try:
            while True:
                try:
                    msg = conn.recv_message()
                except ConnectionClosedError:
                    break
                except (MalformedPayloadError, FrameTooLargeError) as exc:
                    try:
                        conn.send_message(ProtocolError(ERR_MALFORMED, str(exc)))
                    except ConnectionClosedError:
                        pass
                    break
                conn.send_message(self._dispatch(msg, state))
        finally:
            conn.close()

    def _dispatch(self, msg: Message, state: "_ConnectionState") -> Message:
        if isinstance(msg, StartSession):
            return self._on_start(msg, state)
        if isinstance(msg, Commit):
            return self._on_commit(msg, state)
        if isinstance(msg, UploadAdapter):
            return self._on_upload(msg, state)
        if isinstance(msg, ServerGenerate):
            return self._on_generate(msg, state.adapted_proxy)
        return ProtocolError(ERR_UNSUPPORTED, f"unexpected {type(msg).__name__}")

    def _check_prompt(self, prompt: tuple[int, ...]) -> str | None:
        if len(prompt) == 0:
            return "prompt must be non-empty"
        for tok in prompt:
            if not 0 <= tok < self.vocab.size:
                return f"prompt token {tok} out of vocab"
        if self.vocab.eos_id in prompt[:-1]:
            return "eos inside the prompt body"
        return None

    def _on_start(self, msg: StartSession, state: "_ConnectionState") -> Message:
        why = self._check_prompt(msg.prompt)
        if why is not None:
            return ProtocolError(ERR_INVALID_PROMPT, why)
        if msg.session_id in state.sessions:
            return ProtocolError(ERR_INVALID_COMMIT, f"session {msg.session_id} already exists")
        session = ServerSession(
            session_id=msg.session_id,
            vocab=self.vocab,
            prompt=msg.prompt,
            draft_len=msg.draft_len,
            max_new_tokens=msg.max_new_tokens,
        )
        if session.done:  # zero budget or prompt already ends in eos
            return GenerationResult(session_id=msg.session_id, tokens=())
        state.sessions[msg.session_id] = session
        return session.draft(self.blackbox)

    def _on_commit(self, msg: Commit, state: "_ConnectionState") -> Message:
        session = state.sessions.get(msg.session_id)
        if session is None:
            return ProtocolError(ERR_SESSION_UNKNOWN, f"session {msg.session_id}")
        try:
            session.apply_commit(msg)
        except InvalidCommitError as exc:
            return ProtocolError(ERR_INVALID_COMMIT, str(exc))
        except OutOfSyncError as exc:
            return ProtocolError(ERR_OUT_OF_SYNC, str(exc))
        if session.done:
            del state.sessions[msg.session_id]
            return GenerationResult(session_id=msg.session_id, tokens=session.response_tokens())
        return session.draft(self.blackbox)

    def _on_upload(self, msg: UploadAdapter, state: "_ConnectionState") -> Message:
        if self.base_proxy is None:
            return ProtocolError(ERR_UNSUPPORTED, "server hosts no base proxy")
        if msg.base_fingerprint != self.base_proxy.fingerprint():
            return ProtocolError(
                ERR_FINGERPRINT_MISMATCH,
                f"client base {msg.base_fingerprint:016x} != "
                f"server base {self.base_proxy.fingerprint():016x}",
            )
        try:
            adapter = decode_adapter(bytes(msg.adapter_bytes))
            state.adapted_proxy = apply_adapter(self.base_proxy, adapter)
        except (AdapterFormatError, ValueError) as exc:
            return ProtocolError(ERR_MALFORMED_ADAPTER, str(exc))
        return HelloAck(True, "adapter installed")

    def _on_generate(self, msg: ServerGenerate, adapted_proxy) -> Message:
        why = self._check_prompt(msg.prompt)
        if why is not None:
            return ProtocolError(ERR_INVALID_PROMPT, why)
        if msg.flavor == FLAVOR_ADAPTED and adapted_proxy is None:
            return ProtocolError(ERR_UNSUPPORTED, "no adapter uploaded for adapted generation")
        config = GenerationConfig(
            max_new_tokens=msg.max_new_tokens,
            mode=GREEDY if msg.mode == MODE_GREEDY else STOCHASTIC,
            temperature=msg.temperature if msg.mode == MODE_STOCHASTIC else 1.0,
            seed=msg.seed,
        )
        if msg.flavor == FLAVOR_BLACKBOX:
            tokens = generate_blackbox(self.blackbox, list(msg.prompt), config)
        else:
            tokens = generate_adapted(
                self.blackbox, self.base_proxy, adapted_proxy, list(msg.prompt), config
            )
        return GenerationResult(session_id=msg.session_id, tokens=tuple(tokens))


def generate_blackbox(blackbox: LogitModel, prompt: list[int], config: GenerationConfig) -> list[int]:
    """Plain autoregressive generation from the black-box model alone."""
    rng = make_rng(config.seed) if config.mode == STOCHASTIC else None
    seq = list(prompt)
    out: list[int] = []
    if seq and seq[-1] == blackbox.vocab.eos_id:
        return out
    while len(out) < config.max_new_tokens:
        tok = sample_token(blackbox.next_logits(seq), config, rng)
        out.append(tok)
        seq.append(tok)
        if tok == blackbox.vocab.eos_id:
            break
    return out


def generate_adapted(
    blackbox: LogitModel,
    base_proxy: LogitModel,
    tuned_proxy: LogitModel,
    prompt: list[int],
    config: GenerationConfig,
) -> list[int]:
    """Per-token offset-adapted generation, all models evaluated in-process.

    One RNG draw per committed token, exactly like the per-token protocol
    mode — which is what makes server-side (transfer) and client-side
    generation token-identical for the same seed.
    """
    rng = make_rng(config.seed) if config.mode == STOCHASTIC else None
    seq = list(prompt)
    out: list[int] = []
    if seq and seq[-1] == blackbox.vocab.eos_id:
        return out
    while len(out) < config.max_new_tokens:
        triple = OffsetTriple(
            z_b=blackbox.next_logits(seq),
            z_p=base_proxy.next_logits(seq),
            z_p_tuned=tuned_proxy.next_logits(seq),
        )
        tok = adapted_next_token(triple, config, rng)
        out.append(tok)
        seq.append(tok)
        if tok == blackbox.vocab.eos_id:
            break
    return out


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


class Client:
    """Drives sessions against a server over one framed connection."""

    def __init__(
        self,
        conn: FramedConnection,
        vocab: Vocab,
        base_proxy: TinyNeuralLM | None = None,
        adapter: LoraAdapter | None = None,
    ) -> None:
        self.conn = conn
        self.vocab = vocab
        self.base_proxy = base_proxy
        self.adapter = adapter
        self.tuned_proxy = (
            apply_adapter(base_proxy, adapter)
            if base_proxy is not None and adapter is not None
            else None
        )
        self._session_ids = itertools.count(1)

    @property
    def ledger(self) -> CostLedger | None:
        return self.conn.ledger

    def handshake(self) -> None:
        """Preamble + Hello; raises HandshakeRejectedError on refusal."""
        fingerprint = self.base_proxy.fingerprint() if self.base_proxy is not None else 0
        self.conn.send_preamble()
        self.conn.send_message(
            Hello(
                protocol_version=PROTOCOL_VERSION,
                vocab_size=self.vocab.size,
                eos_id=self.vocab.eos_id,
                bos_id=self.vocab.bos_id,
                model_fingerprint=fingerprint,
            )
        )
        ack = self.conn.recv_message()
        if isinstance(ack, ProtocolError):
            _raise_remote(ack)
        if not isinstance(ack, HelloAck):
            raise OutOfSyncError(f"expected HelloAck, got {type(ack).__name__}")
        if not ack.accept:
            raise HandshakeRejectedError(ack.reason)

    def _recv(self) -> Message:
        msg = self.conn.recv_message()
        if isinstance(msg, ProtocolError):
            _raise_remote(msg)
        return msg

    # -- speculative loop ----------------------------------------------------

    def run_speculative(
        self, prompt: list[int], config: GenerationConfig, draft_len: int = 8
    ) -> list[int]:
        """Draft/verify generation; returns the committed response tokens.

        Greedy runs are token-identical for every draft length; stochastic
        runs are deterministic per (seed, draft_len) but not comparable
        across draft lengths, because verification consumes one RNG draw per
        inspected draft position.
        """
        if self.base_proxy is None or self.tuned_proxy is None:
            raise ValueError("speculative generation needs a base proxy and an adapter")
        if draft_len < 1:
            raise ValueError("draft_len must be at least 1")
        rng = make_rng(config.seed) if config.mode == STOCHASTIC else None
        session_id = next(self._session_ids)
        mirror = list(prompt)
        generated = 0
        self.conn.send_message(
            StartSession(
                session_id=session_id,
                prompt=tuple(prompt),
                draft_len=draft_len,
                max_new_tokens=config.max_new_tokens,
            )
        )
        while True:
            msg = self._recv()
            if isinstance(msg, GenerationResult):
                got = list(msg.tokens)
                want = mirror[len(prompt):]
                if got != want:
                    raise OutOfSyncError(
                        f"server result {got} disagrees with client mirror {want}"
                    )
                if self.ledger is not None:
                    self.ledger.check_token_flow()
                return got
            if not isinstance(msg, DraftBatch) or msg.session_id != session_id:
                raise OutOfSyncError(f"unexpected message {msg!r} mid-session")
            commit, new_tokens = self._verify(mirror, msg, config, rng, generated)
            mirror.extend(new_tokens)
            generated += len(new_tokens)
            if self.ledger is not None:
                self.ledger.note_draft(len(msg.tokens))
                self.ledger.note_commit(
                    commit.accept_count, len(msg.tokens), commit.replacement is not None
                )
            self.conn.send_message(commit)

    def _verify(
        self,
        mirror: list[int],
        draft: DraftBatch,
        config: GenerationConfig,
        rng,
        generated: int,
    ) -> tuple[Commit, list[int]]:
        """Accept the agreeing prefix of a draft; replace the first divergence.

        Proxy logits for all drafted positions come from one batched call
        over ``mirror ++ draft[:-1]`` — position i's context is the mirror
        plus the i accepted drafts before it.
        """
        n = len(draft.tokens)
        ctx_seq = mirror + list(draft.tokens[: n - 1])
        z_p_rows = self.base_proxy.batch_next_logits(ctx_seq, n)
        z_t_rows = self.tuned_proxy.batch_next_logits(ctx_seq, n)
        accept = n
        replacement: int | None = None
        for i in range(n):
            triple = OffsetTriple(
                z_b=draft.logits[i], z_p=z_p_rows[i], z_p_tuned=z_t_rows[i]
            )
            sampled = adapted_next_token(triple, config, rng)
            if sampled != draft.tokens[i]:
                accept = i
                replacement = sampled
                break
        new_tokens = list(draft.tokens[:accept])
        if replacement is not None:
            new_tokens.append(replacement)
        total = generated + len(new_tokens)
        done = total >= config.max_new_tokens or (
            len(new_tokens) > 0 and new_tokens[-1] == self.vocab.eos_id
        )
        commit = Commit(
            session_id=draft.session_id,
            accept_count=accept,
            replacement=replacement,
            done=done,
        )
        return commit, new_tokens

    def run_per_token(self, prompt: list[int], config: GenerationConfig) -> list[int]:
        """One round trip per committed token: the draft-length-1 loop."""
        return self.run_speculative(prompt, config, draft_len=1)

    # -- server-side modes ----------------------------------------------------

    def run_transfer(self, prompt: list[int], config: GenerationConfig) -> list[int]:
        """Upload the adapter, then let the server generate entirely locally."""
        if self.base_proxy is None or self.adapter is None:
            raise ValueError("transfer mode needs a base proxy and an adapter")
        self.conn.send_message(
            UploadAdapter(
                adapter_bytes=encode_adapter(self.adapter.snapshot()),
                base_fingerprint=self.base_proxy.fingerprint(),
            )
        )
        ack = self._recv()
        if not (isinstance(ack, HelloAck) and ack.accept):
            raise OutOfSyncError(f"adapter upload not acknowledged: {ack!r}")
        return self._server_generate(prompt, config, FLAVOR_ADAPTED)

    def run_api(self, prompt: list[int], config: GenerationConfig) -> list[int]:
        """Pure black-box generation on the server; no proxies involved."""
        return self._server_generate(prompt, config, FLAVOR_BLACKBOX)

    def _server_generate(
        self, prompt: list[int], config: GenerationConfig, flavor: int
    ) -> list[int]:
        session_id = next(self._session_ids)
        self.conn.send_message(
            ServerGenerate(
                session_id=session_id,
                prompt=tuple(prompt),
                flavor=flavor,
                mode=MODE_GREEDY if config.mode == GREEDY else MODE_STOCHASTIC,
                temperature=config.temperature,
                seed=config.seed,
                max_new_tokens=config.max_new_tokens,
            )
        )
        msg = self._recv()
        if not isinstance(msg, GenerationResult) or msg.session_id != session_id:
            raise OutOfSyncError(f"expected GenerationResult, got {msg!r}")
        return list(msg.tokens)


# ---------------------------------------------------------------------------
# Wiring helpers
# ---------------------------------------------------------------------------


def serve_channel(server: Server, channel, *, daemon: bool = True) -> threading.Thread:
    """Serve one already-connected channel on a background thread."""
    conn = FramedConnection(channel, side="server")
    thread = threading.Thread(target=server.serve_connection, args=(conn,), daemon=daemon)
    thread.start()
    return thread


def connect_in_process(
    server: Server, ledger: CostLedger | None = None
) -> tuple[FramedConnection, threading.Thread]:
    """In-process channel pair with the server end running on a thread."""
    client_end, server_end = queue_channel_pair()
    thread = serve_channel(server, server_end)
    return FramedConnection(client_end, side="client", ledger=ledger), thread


class SocketServer:
    """Loopback/TCP front end: one service thread per accepted connection."""

    def __init__(self, server: Server, host: str = "127.0.0.1", port: int = 0) -> None:
        self.server = server
        self._listener = socket.create_server((host, port))
        self.address = self._listener.getsockname()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._stopping = False

    def start(self) -> "SocketServer":
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        while not self._stopping:
            try:
                sock, _ = self._listener.accept()
            except OSError:
                break
            serve_channel(self.server, SocketChannel(sock))

    def close(self) -> None:
        self._stopping = True
        try:
            self._listener.close()
        except OSError:
            pass

    def __enter__(self) -> "SocketServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.close()


def connect_socket(
    host: str, port: int, ledger: CostLedger | None = None
) -> FramedConnection:
    sock = socket.create_connection((host, port))
    return FramedConnection(SocketChannel(sock), side="client", ledger=ledger)
