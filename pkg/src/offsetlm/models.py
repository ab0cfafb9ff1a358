"""Deterministic desk-scale language models behind a single logits interface.

Two concrete backends:

* :class:`BigramTableModel` — additive-smoothed adjacent-pair counts; its
  logits are exactly ``ln(counts[last] + alpha)``, so tests can check it
  against a brute-force count oracle.
* :class:`TinyNeuralLM` — a fixed-context-window MLP: the last ``context``
  token embeddings are concatenated, pushed through one tanh hidden layer,
  and projected to vocab logits. Sequences shorter than the window are
  left-padded with ``bos_id``.

Both are immutable after construction and serialize to the ``PRDM`` snapshot
format (little-endian, binary32 reals). A model's fingerprint is the 64-bit
FNV-1a hash of its snapshot bytes, which makes "same parameters" checkable
across processes with one integer.

Inference parameters are binary32: training happens elsewhere in binary64
and rounds exactly once, when the snapshot is taken.
"""

from __future__ import annotations

import struct
from abc import ABC, abstractmethod

import numpy as np

from .core import Vocab

PRDM_MAGIC = b"PRDM"
PRDM_VERSION = 1
ARCH_BIGRAM = 1
ARCH_TINY_NEURAL = 2

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


class VocabMismatchError(ValueError):
    """A token id fell outside the model's vocabulary."""


class EmptyCorpusError(ValueError):
    """The corpus contained no tokens to fit on."""


class SnapshotFormatError(ValueError):
    """A PRDM payload was malformed or truncated."""


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a over ``data``."""
    h = _FNV_OFFSET
    for b in data:
        h ^= b
        h = (h * _FNV_PRIME) & _U64
    return h


def _check_tokens(seq: list[int], vocab: Vocab) -> None:
    if len(seq) == 0:
        raise ValueError("sequence must be non-empty")
    for tok in seq:
        if not 0 <= tok < vocab.size:
            raise VocabMismatchError(
                f"token {tok} out of range for vocab size {vocab.size}"
            )


class LogitModel(ABC):
    """Anything that maps a token sequence to next-token logits."""

    vocab: Vocab

    @abstractmethod
    def next_logits(self, seq: list[int]) -> np.ndarray:
        """Float32 logits for the token following ``seq``."""

    def batch_next_logits(self, seq: list[int], count: int) -> np.ndarray:
        """Logits at the ``count`` trailing context boundaries of ``seq``.

        Row ``j`` (0-based) equals ``next_logits`` over the prefix of length
        ``len(seq) - count + 1 + j``; the last row is the full sequence. Rows
        are computed with the same code path as the sequential calls, so the
        result is bit-identical to them by construction.
        """
        if count < 1 or count > len(seq):
            raise ValueError(f"count {count} out of range for sequence length {len(seq)}")
        rows = [self.next_logits(seq[: len(seq) - count + 1 + j]) for j in range(count)]
        return np.stack(rows)

    def snapshot_bytes(self) -> bytes:
        return encode_model(self)

    def fingerprint(self) -> int:
        """64-bit FNV-1a over the model's snapshot bytes."""
        return fnv1a64(self.snapshot_bytes())


class BigramTableModel(LogitModel):
    """Additive-smoothed bigram counts; logits are ln(counts[last] + alpha)."""

    def __init__(self, vocab: Vocab, counts: np.ndarray, alpha: float) -> None:
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (vocab.size, vocab.size):
            raise ValueError(
                f"counts must be {(vocab.size, vocab.size)}, got {counts.shape}"
            )
        if np.any(counts < 0):
            raise ValueError("counts must be non-negative")
        if not alpha > 0:
            raise ValueError("alpha must be positive")
        self.vocab = vocab
        self.counts = counts
        self.counts.setflags(write=False)
        # Rounded to binary32 up front so in-memory logits match a reloaded
        # snapshot bit-for-bit (PRDM stores reals as binary32).
        self.alpha = float(np.float32(alpha))
        self._logit_table = np.log(
            self.counts.astype(np.float64) + self.alpha
        ).astype(np.float32)
        self._logit_table.setflags(write=False)

    def next_logits(self, seq: list[int]) -> np.ndarray:
        _check_tokens(seq, self.vocab)
        return self._logit_table[seq[-1]].copy()


class TinyNeuralLM(LogitModel):
    """Fixed-window MLP language model (binary32 inference snapshot).

    Forward pass for a sequence: take the last ``context`` tokens (left-pad
    with ``bos_id``), look up and concatenate their embeddings, apply
    ``tanh(W1 @ x + b1)``, then project with ``W2 @ h + b2``.
    """

    def __init__(
        self,
        vocab: Vocab,
        context: int,
        embedding: np.ndarray,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: np.ndarray,
    ) -> None:
        if context < 1:
            raise ValueError("context window must be at least 1")
        embedding = np.asarray(embedding, dtype=np.float32)
        w1 = np.asarray(w1, dtype=np.float32)
        b1 = np.asarray(b1, dtype=np.float32)
        w2 = np.asarray(w2, dtype=np.float32)
        b2 = np.asarray(b2, dtype=np.float32)
        v = vocab.size
        d = embedding.shape[1] if embedding.ndim == 2 else 0
        h = w1.shape[0] if w1.ndim == 2 else 0
        if embedding.shape != (v, d) or d < 1:
            raise ValueError(f"embedding must be (vocab, d), got {embedding.shape}")
        if w1.shape != (h, context * d) or h < 1:
            raise ValueError(f"w1 must be (h, context*d), got {w1.shape}")
        if b1.shape != (h,):
            raise ValueError(f"b1 must be ({h},), got {b1.shape}")
        if w2.shape != (v, h):
            raise ValueError(f"w2 must be ({v}, {h}), got {w2.shape}")
        if b2.shape != (v,):
            raise ValueError(f"b2 must be ({v},), got {b2.shape}")
        self.vocab = vocab
        self.context = context
        self.embed_dim = d
        self.hidden_dim = h
        self.embedding = embedding
        self.w1 = w1
        self.b1 = b1
        self.w2 = w2
        self.b2 = b2
        for arr in (self.embedding, self.w1, self.b1, self.w2, self.b2):
            arr.setflags(write=False)

    def window_ids(self, seq: list[int]) -> list[int]:
        """The last ``context`` tokens of ``seq``, left-padded with bos."""
        if len(seq) >= self.context:
            return list(seq[-self.context:])
        pad = self.context - len(seq)
        return [self.vocab.bos_id] * pad + list(seq)

    def embed_window(self, seq: list[int]) -> np.ndarray:
        """Concatenated window embeddings: float32 vector of length context*d."""
        return self.embedding[self.window_ids(seq)].reshape(-1)

    def next_logits(self, seq: list[int]) -> np.ndarray:
        _check_tokens(seq, self.vocab)
        x = self.embed_window(seq)
        pre = self.w1 @ x
        pre = pre + self.b1
        hid = np.tanh(pre)
        out = self.w2 @ hid
        out = out + self.b2
        return out

    @staticmethod
    def random(
        vocab: Vocab,
        context: int = 4,
        embed_dim: int = 16,
        hidden_dim: int = 32,
        seed: int = 0,
        scale: float = 0.5,
    ) -> "TinyNeuralLM":
        """A seeded random snapshot (binary64 draws rounded once to binary32)."""
        rng = np.random.Generator(np.random.PCG64(seed))
        d, h, v = embed_dim, hidden_dim, vocab.size
        params = _init_neural_params(rng, v, context, d, h, scale)
        return TinyNeuralLM(vocab, context, *[p.astype(np.float32) for p in params])


def _init_neural_params(rng, v, context, d, h, scale):
    emb = rng.normal(0.0, scale, size=(v, d))
    w1 = rng.normal(0.0, scale / np.sqrt(context * d), size=(h, context * d))
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, scale / np.sqrt(h), size=(v, h))
    b2 = np.zeros(v)
    return emb, w1, b1, w2, b2


def fit_bigram(corpus: list[list[int]], vocab: Vocab, alpha: float) -> BigramTableModel:
    """Count adjacent token pairs over the corpus and smooth with ``alpha``."""
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not any(len(doc) > 0 for doc in corpus):
        raise EmptyCorpusError("corpus contains no tokens")
    counts = np.zeros((vocab.size, vocab.size), dtype=np.int64)
    for doc in corpus:
        for tok in doc:
            if not 0 <= tok < vocab.size:
                raise VocabMismatchError(
                    f"corpus token {tok} out of range for vocab size {vocab.size}"
                )
        for a, b in zip(doc, doc[1:]):
            counts[a, b] += 1
    return BigramTableModel(vocab, counts, alpha)


# ---------------------------------------------------------------------------
# Full-parameter training for the neural backend
# ---------------------------------------------------------------------------


def train_neural_lm(
    corpus: list[list[int]],
    vocab: Vocab,
    *,
    context: int = 4,
    embed_dim: int = 16,
    hidden_dim: int = 32,
    lr: float = 0.1,
    batch_size: int = 8,
    epochs: int = 5,
    seed: int = 0,
) -> TinyNeuralLM:
    """Fit a :class:`TinyNeuralLM` with mini-batch SGD on next-token cross-entropy.

    All arithmetic runs in binary64; the returned model is the binary32
    snapshot taken once at the end. Deterministic given (seed, corpus order).
    """
    usable = [doc for doc in corpus if len(doc) >= 2]
    if not usable:
        raise EmptyCorpusError("corpus contains no sequence of length >= 2")
    rng = np.random.Generator(np.random.PCG64(seed))
    emb, w1, b1, w2, b2 = _init_neural_params(
        rng, vocab.size, context, embed_dim, hidden_dim, 0.5
    )

    windows, targets = _training_positions(usable, vocab, context)
    n = windows.shape[0]
    for _ in range(max(0, epochs)):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            win, tgt = windows[idx], targets[idx]
            x = emb[win].reshape(len(idx), -1)  # (b, context*d)
            pre = x @ w1.T + b1
            hid = np.tanh(pre)
            logits = hid @ w2.T + b2
            z = logits - logits.max(axis=1, keepdims=True)
            p = np.exp(z)
            p /= p.sum(axis=1, keepdims=True)
            g = p
            g[np.arange(len(idx)), tgt] -= 1.0
            g /= len(idx)
            d_w2 = g.T @ hid
            d_b2 = g.sum(axis=0)
            d_hid = g @ w2
            d_pre = d_hid * (1.0 - hid * hid)
            d_w1 = d_pre.T @ x
            d_b1 = d_pre.sum(axis=0)
            d_x = (d_pre @ w1).reshape(len(idx), context, embed_dim)
            w1 -= lr * d_w1
            b1 -= lr * d_b1
            w2 -= lr * d_w2
            b2 -= lr * d_b2
            for c in range(context):
                np.add.at(emb, win[:, c], -lr * d_x[:, c, :])
    return TinyNeuralLM(
        vocab,
        context,
        emb.astype(np.float32),
        w1.astype(np.float32),
        b1.astype(np.float32),
        w2.astype(np.float32),
        b2.astype(np.float32),
    )


def _training_positions(corpus, vocab: Vocab, context: int):
    """All (window, next-token) pairs in the corpus as integer arrays."""
    windows, targets = [], []
    for doc in corpus:
        _check_tokens(doc, vocab)
        for j in range(len(doc) - 1):
            prefix = doc[: j + 1]
            if len(prefix) >= context:
                win = prefix[-context:]
            else:
                win = [vocab.bos_id] * (context - len(prefix)) + prefix
            windows.append(win)
            targets.append(doc[j + 1])
    return np.asarray(windows, dtype=np.int64), np.asarray(targets, dtype=np.int64)


# ---------------------------------------------------------------------------
# PRDM snapshot format
# ---------------------------------------------------------------------------


def encode_model(model: LogitModel) -> bytes:
    """Serialize a model to PRDM bytes (little-endian, binary32 reals)."""
    head = PRDM_MAGIC + struct.pack(
        "<BB", PRDM_VERSION, _arch_tag(model)
    ) + struct.pack("<III", model.vocab.size, model.vocab.eos_id, model.vocab.bos_id)
    if isinstance(model, BigramTableModel):
        if np.any(model.counts > 0xFFFFFFFF):
            raise ValueError("bigram counts exceed the 32-bit snapshot range")
        body = model.counts.astype("<u4").tobytes(order="C")
        body += struct.pack("<f", model.alpha)
    else:
        assert isinstance(model, TinyNeuralLM)
        body = struct.pack("<III", model.context, model.embed_dim, model.hidden_dim)
        for arr in (model.embedding, model.w1, model.b1, model.w2, model.b2):
            body += arr.astype("<f4").tobytes(order="C")
    return head + body


def _arch_tag(model: LogitModel) -> int:
    if isinstance(model, BigramTableModel):
        return ARCH_BIGRAM
    if isinstance(model, TinyNeuralLM):
        return ARCH_TINY_NEURAL
    raise TypeError(f"cannot snapshot model of type {type(model).__name__}")


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotFormatError(
                f"snapshot truncated at byte {len(self.data)} (needed {self.pos + n})"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def decode_model(data: bytes) -> LogitModel:
    """Parse PRDM bytes back into a model; raises SnapshotFormatError."""
    r = _Reader(data)
    if r.take(4) != PRDM_MAGIC:
        raise SnapshotFormatError("bad snapshot magic")
    version, arch = struct.unpack("<BB", r.take(2))
    if version != PRDM_VERSION:
        raise SnapshotFormatError(f"unsupported snapshot version {version}")
    size, eos_id, bos_id = struct.unpack("<III", r.take(12))
    try:
        vocab = Vocab(size=size, eos_id=eos_id, bos_id=bos_id)
    except ValueError as exc:
        raise SnapshotFormatError(f"invalid vocab in snapshot: {exc}") from exc
    if arch == ARCH_BIGRAM:
        counts = np.frombuffer(r.take(4 * size * size), dtype="<u4").reshape(size, size)
        (alpha,) = struct.unpack("<f", r.take(4))
        try:
            model: LogitModel = BigramTableModel(vocab, counts.astype(np.int64), float(alpha))
        except ValueError as exc:
            raise SnapshotFormatError(f"invalid bigram snapshot: {exc}") from exc
    elif arch == ARCH_TINY_NEURAL:
        context, d, h = struct.unpack("<III", r.take(12))
        if context < 1 or d < 1 or h < 1:
            raise SnapshotFormatError("invalid tiny-neural dimensions in snapshot")
        emb = np.frombuffer(r.take(4 * size * d), dtype="<f4").reshape(size, d)
        w1 = np.frombuffer(r.take(4 * h * context * d), dtype="<f4").reshape(h, context * d)
        b1 = np.frombuffer(r.take(4 * h), dtype="<f4")
        w2 = np.frombuffer(r.take(4 * size * h), dtype="<f4").reshape(size, h)
        b2 = np.frombuffer(r.take(4 * size), dtype="<f4")
        model = TinyNeuralLM(vocab, context, emb, w1, b1, w2, b2)
    else:
        raise SnapshotFormatError(f"unknown architecture tag {arch}")
    if r.pos != len(data):
        raise SnapshotFormatError(
            f"snapshot has {len(data) - r.pos} trailing bytes at offset {r.pos}"
        )
    return model


def save_model(model: LogitModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_model(model))


def load_model(path) -> LogitModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())
