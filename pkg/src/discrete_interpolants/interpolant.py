"""Forward corruption x_1 -> x_t for the masked discrete interpolant.

Token sequences are plain integer numpy arrays of shape ``(L,)`` or ``(N, L)``;
every function here works on either.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .schedule import CouplingSpec, Schedule, SmoothingSpec, coupling_endpoints, kappa, smoothing_weights


@dataclass(frozen=True)
class VocabSpec:
    """Data tokens are ``0..data_size-1``; mask and null-condition ids follow."""

    data_size: int

    def __post_init__(self):
        if self.data_size < 1:
            raise ValueError(f"data_size must be positive, got {self.data_size}")

    @property
    def mask_id(self) -> int:
        return self.data_size

    @property
    def null_cond_id(self) -> int:
        return self.data_size + 1

    @property
    def size(self) -> int:
        return self.data_size + 2

    def check_clean(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.data_size):
            raise ValueError(
                f"clean sequences must only hold data tokens in [0, {self.data_size})"
            )
        return tokens


@dataclass
class CorruptionState:
    x_t: np.ndarray
    t: float
    masked: np.ndarray

    @classmethod
    def from_tokens(cls, x_t, t: float, mask_id: int) -> "CorruptionState":
        x_t = np.asarray(x_t)
        return cls(x_t, float(t), x_t == mask_id)

    @property
    def n_masked(self) -> int:
        return int(self.masked.sum())


def corrupt(x1, t: float, schedule: Schedule, rng: np.random.Generator, vocab: VocabSpec) -> CorruptionState:
    """Keep each token independently with probability kappa(t), else mask it."""
    x1 = vocab.check_clean(x1)
    keep = rng.random(x1.shape) < kappa(schedule, t)
    x_t = np.where(keep, x1, vocab.mask_id)
    return CorruptionState(x_t, float(t), ~keep)


def corrupt_smoothed(x1, t: float, schedule: Schedule, spec: SmoothingSpec,
                     rng: np.random.Generator, vocab: VocabSpec) -> CorruptionState:
    """Per token: mask, a uniformly random data token, or the clean token."""
    x1 = vocab.check_clean(x1)
    w_mask, w_uniform, _ = smoothing_weights(spec, schedule, t)
    u = rng.random(x1.shape)
    noise = rng.integers(0, vocab.data_size, size=x1.shape)
    x_t = np.where(u < w_mask, vocab.mask_id, np.where(u < w_mask + w_uniform, noise, x1))
    return CorruptionState(x_t, float(t), x_t == vocab.mask_id)


def corrupt_coupled(x1, t: float, schedule: Schedule, coupling: CouplingSpec,
                    rng: np.random.Generator, vocab: VocabSpec) -> CorruptionState:
    """Interpolate between the coupled source and ``x1``.

    Positions copied into the source carry ``x1`` at every t; the rest are
    corrupted exactly as in :func:`corrupt`.
    """
    x1 = vocab.check_clean(x1)
    x0_bar, x1_bar = coupling_endpoints(x1, coupling, rng, vocab.mask_id)
    keep = rng.random(x1.shape) < kappa(schedule, t)
    x_t = np.where(keep, x1_bar, x0_bar)
    return CorruptionState(x_t, float(t), x_t == vocab.mask_id)


@dataclass(frozen=True)
class JointLayout:
    """Two modalities flattened and concatenated into one token sequence.

    Modality A keeps its ids; modality B ids are shifted by ``vocab_x.data_size``
    so both share one alphabet whose mask id follows all data ids.
    """

    vocab_x: VocabSpec
    vocab_y: VocabSpec
    len_x: int
    len_y: int

    @property
    def vocab(self) -> VocabSpec:
        return VocabSpec(self.vocab_x.data_size + self.vocab_y.data_size)

    @property
    def length(self) -> int:
        return self.len_x + self.len_y

    @property
    def offset(self) -> int:
        return self.vocab_x.data_size

    def allowed(self) -> np.ndarray:
        """``(L, K)`` boolean table of the data ids each position may take."""
        table = np.zeros((self.length, self.vocab.size), dtype=bool)
        table[: self.len_x, : self.offset] = True
        table[self.len_x:, self.offset: self.offset + self.vocab_y.data_size] = True
        return table

    def concat(self, x, y) -> np.ndarray:
        x = np.asarray(x)
        y = np.asarray(y)
        mask = self.vocab.mask_id
        x = np.where(x == self.vocab_x.mask_id, mask, x)
        y = np.where(y == self.vocab_y.mask_id, mask, y + self.offset)
        return np.concatenate([x, y], axis=-1)

    def split(self, z):
        z = np.asarray(z)
        mask = self.vocab.mask_id
        x = z[..., : self.len_x]
        y = z[..., self.len_x:]
        x = np.where(x == mask, self.vocab_x.mask_id, x)
        y = np.where(y == mask, self.vocab_y.mask_id, y - self.offset)
        return x, y


def corrupt_joint(x1, y1, t: float, schedule: Schedule, rng: np.random.Generator,
                  vocab_x: VocabSpec, vocab_y: VocabSpec):
    """Corrupt both modalities at one shared t with independent mask draws."""
    return (corrupt(x1, t, schedule, rng, vocab_x),
            corrupt(y1, t, schedule, rng, vocab_y))
