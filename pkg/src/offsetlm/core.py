"""Vocabulary, token-sequence, logit, and sampling primitives.

Conventions used throughout the package:

* token ids are plain Python ints in ``[0, vocab.size)``;
* token sequences are lists of ints, holding at most one ``eos_id`` which,
  if present, is the last element;
* logit vectors are one-dimensional ``numpy.float32`` arrays of length
  ``vocab.size`` with all entries finite;
* every stochastic draw goes through a named, seeded generator
  (:func:`make_rng`, numpy PCG64) and consumes exactly one uniform variate
  per sampled token, so runs are reproducible bit-for-bit from the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GREEDY = "greedy"
STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class Vocab:
    """A contiguous token-id space with reserved end/begin-of-sequence ids."""

    size: int
    eos_id: int
    bos_id: int

    def __post_init__(self) -> None:
        if self.size < 3:
            raise ValueError(f"vocab size must be at least 3, got {self.size}")
        for name in ("eos_id", "bos_id"):
            tok = getattr(self, name)
            if not 0 <= tok < self.size:
                raise ValueError(f"{name}={tok} out of range for vocab size {self.size}")
        if self.eos_id == self.bos_id:
            raise ValueError("eos_id and bos_id must differ")


@dataclass(frozen=True)
class GenerationConfig:
    """How to turn logits into tokens and when to stop.

    ``mode`` is either ``"greedy"`` (argmax, ties to the lowest index) or
    ``"stochastic"`` (temperature softmax sampling driven by ``seed``).
    ``max_new_tokens`` counts committed response tokens only; zero is a legal
    degenerate budget yielding an empty response.
    """

    max_new_tokens: int
    mode: str = GREEDY
    temperature: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.max_new_tokens < 0:
            raise ValueError("max_new_tokens must be non-negative")
        if self.mode not in (GREEDY, STOCHASTIC):
            raise ValueError(f"unknown sampling mode {self.mode!r}")
        if self.mode == STOCHASTIC and not self.temperature > 0.0:
            raise ValueError("temperature must be positive for stochastic sampling")


def validate_sequence(tokens: list[int], vocab: Vocab) -> None:
    """Check the token-sequence invariants; raise ValueError on violation."""
    for tok in tokens:
        if not 0 <= tok < vocab.size:
            raise ValueError(f"token {tok} out of range for vocab size {vocab.size}")
    eos_positions = [i for i, tok in enumerate(tokens) if tok == vocab.eos_id]
    if len(eos_positions) > 1:
        raise ValueError("sequence contains more than one eos token")
    if eos_positions and eos_positions[0] != len(tokens) - 1:
        raise ValueError("eos token must be the last element of a sequence")


def as_logits(values, size: int | None = None) -> np.ndarray:
    """Coerce ``values`` to a finite 1-D float32 logit vector."""
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError(f"logit vector must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ValueError(f"logit vector has length {arr.shape[0]}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("logit vector contains non-finite entries")
    return arr


def make_rng(seed: int) -> np.random.Generator:
    """The package-wide seeded generator: numpy PCG64.

    All stochastic sampling in this package flows through generators built
    here, which is what makes client-side and server-side stochastic runs
    reproducible and mutually comparable.
    """
    return np.random.Generator(np.random.PCG64(seed))


def argmax_sample(logits: np.ndarray) -> int:
    """Greedy selection: the smallest index attaining the maximum logit."""
    if logits.ndim != 1 or logits.shape[0] == 0:
        raise ValueError("argmax_sample expects a non-empty 1-D logit vector")
    return int(np.argmax(logits))


def softmax64(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax computed in binary64 with max subtraction."""
    if not temperature > 0.0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    z = z - np.max(z)
    e = np.exp(z)
    return e / np.sum(e)


def seeded_sample(logits: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    """Draw one token from ``softmax(logits / temperature)``.

    Consumes exactly one uniform variate from ``rng`` and inverts the CDF of
    the binary64 softmax, so the draw is a pure function of (logits,
    temperature, generator state).
    """
    probs = softmax64(logits, temperature)
    u = rng.random()
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, u, side="right"))
    return min(idx, probs.shape[0] - 1)


def sample_token(logits: np.ndarray, config: GenerationConfig, rng: np.random.Generator | None) -> int:
    """Dispatch to greedy or seeded-stochastic selection per ``config``."""
    if config.mode == GREEDY:
        return argmax_sample(logits)
    if rng is None:
        raise ValueError("stochastic sampling requires an rng")
    return seeded_sample(logits, config.temperature, rng)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Log-probabilities of ``logits``, returned as float32.

    Computed in binary64 with max subtraction; ``exp`` of the result sums to
    one within 1e-9 in binary64 accumulation (1e-6 after the float32 round).
    """
    z = np.asarray(logits, dtype=np.float64)
    z = z - np.max(z)
    lse = np.log(np.sum(np.exp(z)))
    return (z - lse).astype(np.float32)


def parse_token_line(line: str, vocab: Vocab | None = None) -> list[int]:
    """Parse one whitespace-separated decimal token-id line."""
    tokens = [int(part) for part in line.split()]
    if vocab is not None:
        for tok in tokens:
            if not 0 <= tok < vocab.size:
                raise ValueError(f"token {tok} out of range for vocab size {vocab.size}")
    return tokens


def read_corpus(path, vocab: Vocab | None = None) -> list[list[int]]:
    """Read a corpus file: one document per line, decimal token ids.

    Blank lines are preserved as empty documents so that degenerate corpora
    stay visible to the fitting code (which decides whether to reject them).
    """
    docs = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip("\n")
            if line.strip() == "":
                docs.append([])
            else:
                docs.append(parse_token_line(line, vocab))
    return docs
