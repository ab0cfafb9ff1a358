"""Logit-offset correction: steer a black-box model with a local proxy pair.

Given three logit vectors over the same vocabulary —

* ``z_b``   from the remote black-box model,
* ``z_p``   from the local base proxy,
* ``z_p_t`` from the tuned proxy (base + adapter) —

the adjusted logits are ``z_b + (z_p_t - z_p)``: the tuning delta measured on
the proxy pair is transplanted onto the black-box logits, and the next token
is sampled from the result. With an untouched adapter the delta is zero and
the black-box behaviour passes through unchanged; under greedy selection the
adjustment is also insensitive to any constant shift applied to a whole
vector, since argmax ignores per-vector offsets.

All three vectors are binary32 and the composition is performed in binary32,
in the fixed order ``z_b + (z_p_t - z_p)``, so independent implementations
agree bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GenerationConfig, sample_token


class LengthMismatchError(ValueError):
    """Logit vectors of different lengths were combined."""


@dataclass(frozen=True)
class OffsetTriple:
    """The three aligned logit vectors entering one adjustment."""

    z_b: np.ndarray
    z_p: np.ndarray
    z_p_tuned: np.ndarray

    def __post_init__(self) -> None:
        lengths = {self.z_b.shape, self.z_p.shape, self.z_p_tuned.shape}
        if len(lengths) != 1 or self.z_b.ndim != 1:
            raise LengthMismatchError(
                f"logit vectors disagree in shape: {self.z_b.shape}, "
                f"{self.z_p.shape}, {self.z_p_tuned.shape}"
            )


def adaptation_offset(z_p_tuned: np.ndarray, z_p: np.ndarray) -> np.ndarray:
    """Elementwise tuning delta (tuned minus base), binary32."""
    if z_p_tuned.shape != z_p.shape:
        raise LengthMismatchError(
            f"offset operands disagree in shape: {z_p_tuned.shape} vs {z_p.shape}"
        )
    return (z_p_tuned.astype(np.float32, copy=False)
            - z_p.astype(np.float32, copy=False))


def adjust(z_b: np.ndarray, offset: np.ndarray) -> np.ndarray:
    """Apply a tuning delta to black-box logits, binary32."""
    if z_b.shape != offset.shape:
        raise LengthMismatchError(
            f"adjust operands disagree in shape: {z_b.shape} vs {offset.shape}"
        )
    return z_b.astype(np.float32, copy=False) + offset


def adjusted_logits(triple: OffsetTriple) -> np.ndarray:
    """Canonical composition ``z_b + (z_p_tuned - z_p)``."""
    return adjust(triple.z_b, adaptation_offset(triple.z_p_tuned, triple.z_p))


def adapted_next_token(
    triple: OffsetTriple,
    config: GenerationConfig,
    rng: np.random.Generator | None = None,
) -> int:
    """Sample the next token from the offset-adjusted logits."""
    return sample_token(adjusted_logits(triple), config, rng)
