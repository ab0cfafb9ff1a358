"""Message vocabulary for the draft/verify wire protocol.

These are plain records; their byte layout lives in :mod:`offsetlm.transport`.
Structural invariants that a decoder can check without session state are
enforced here in ``__post_init__`` so that a decoded message is always a
well-formed one. Cross-message invariants (commit counts versus the last
draft, session ids, budgets) belong to :mod:`offsetlm.protocol`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PROTOCOL_VERSION = 1

FLAVOR_BLACKBOX = 0  # generate from the black-box model alone (api mode)
FLAVOR_ADAPTED = 1  # offset-adapted generation using the uploaded adapter

MODE_GREEDY = 0
MODE_STOCHASTIC = 1


def _token_tuple(tokens, what: str) -> tuple[int, ...]:
    out = []
    for tok in tokens:
        tok = int(tok)
        if tok < 0 or tok > 0xFFFFFFFF:
            raise ValueError(f"{what} contains an invalid token id {tok!r}")
        out.append(tok)
    return tuple(out)


@dataclass(frozen=True)
class Hello:
    """Client's opening claim: protocol version, vocab geometry, proxy print."""

    protocol_version: int
    vocab_size: int
    eos_id: int
    bos_id: int
    model_fingerprint: int

    def __post_init__(self) -> None:
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be positive")
        for name in ("eos_id", "bos_id"):
            if not 0 <= getattr(self, name) < self.vocab_size:
                raise ValueError(f"{name} out of range in Hello")


@dataclass(frozen=True)
class HelloAck:
    """Server's verdict on a Hello (also acks adapter uploads)."""

    accept: bool
    reason: str = ""


@dataclass(frozen=True)
class StartSession:
    session_id: int
    prompt: tuple[int, ...]
    draft_len: int
    max_new_tokens: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", _token_tuple(self.prompt, "prompt"))
        if self.draft_len < 1:
            raise ValueError("draft_len must be at least 1")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be non-negative")


@dataclass(eq=False)
class DraftBatch:
    """One server round: greedily drafted tokens and their black-box logits."""

    session_id: int
    tokens: tuple[int, ...]
    logits: np.ndarray  # (len(tokens), vocab) float32

    def __post_init__(self) -> None:
        self.tokens = _token_tuple(self.tokens, "draft tokens")
        self.logits = np.asarray(self.logits, dtype=np.float32)
        if len(self.tokens) < 1:
            raise ValueError("a draft batch must contain at least one token")
        if self.logits.ndim != 2 or self.logits.shape[0] != len(self.tokens):
            raise ValueError(
                f"draft logits shape {self.logits.shape} does not match "
                f"{len(self.tokens)} drafted tokens"
            )
        if self.logits.shape[1] < 1:
            raise ValueError("draft logits must have at least one column")
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("draft logits contain non-finite entries")

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, DraftBatch)
            and self.session_id == other.session_id
            and self.tokens == other.tokens
            and self.logits.shape == other.logits.shape
            and bool(np.array_equal(self.logits, other.logits))
        )


@dataclass(frozen=True)
class Commit:
    """Client's verdict on the last draft batch.

    ``accept_count`` drafted tokens are taken verbatim; ``replacement``, when
    present, is the client's corrected token at the first divergence. ``done``
    marks the session finished (eos committed or budget exhausted).
    """

    session_id: int
    accept_count: int
    replacement: int | None = None
    done: bool = False

    def __post_init__(self) -> None:
        if self.accept_count < 0:
            raise ValueError("accept_count must be non-negative")
        if self.replacement is not None:
            object.__setattr__(self, "replacement", _token_tuple([self.replacement], "replacement")[0])


@dataclass(frozen=True)
class UploadAdapter:
    """Ship serialized adapter bytes for server-side composition."""

    adapter_bytes: bytes
    base_fingerprint: int

    def __post_init__(self) -> None:
        if len(self.adapter_bytes) < 1:
            raise ValueError("adapter payload must be non-empty")


@dataclass(frozen=True)
class ServerGenerate:
    """Ask the server to run a whole generation locally.

    ``flavor`` selects the black-box alone (api mode) or the offset-adapted
    composition using the previously uploaded adapter (transfer mode).
    """

    session_id: int
    prompt: tuple[int, ...]
    flavor: int
    mode: int
    temperature: float
    seed: int
    max_new_tokens: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "prompt", _token_tuple(self.prompt, "prompt"))
        if self.flavor not in (FLAVOR_BLACKBOX, FLAVOR_ADAPTED):
            raise ValueError(f"unknown generation flavor {self.flavor}")
        if self.mode not in (MODE_GREEDY, MODE_STOCHASTIC):
            raise ValueError(f"unknown sampling mode tag {self.mode}")
        if self.mode == MODE_STOCHASTIC and not self.temperature > 0.0:
            raise ValueError("stochastic sampling needs a positive temperature")
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be non-negative")


@dataclass(frozen=True)
class GenerationResult:
    session_id: int
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", _token_tuple(self.tokens, "result tokens"))


@dataclass(frozen=True)
class ProtocolError:
    """Carried over the wire when one side must refuse to continue."""

    code: str
    text: str = ""

    def __post_init__(self) -> None:
        if not self.code:
            raise ValueError("protocol error code must be non-empty")


Message = (
    Hello
    | HelloAck
    | StartSession
    | DraftBatch
    | Commit
    | UploadAdapter
    | ServerGenerate
    | GenerationResult
    | ProtocolError
)
