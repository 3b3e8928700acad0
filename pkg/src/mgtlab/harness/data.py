"""Synthetic copy sequences and byte-level corpus ingestion."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import IngestionError, InvalidConfigurationError

# rng stream tags keep train, validation and probe draws disjoint
TRAIN_STREAM = 0
VAL_STREAM = 1
PROBE_STREAM = 2


def _rng(stream: int, seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(stream), int(seed) & 0xFFFFFFFF, int(index)])


def copy_sequence(symbols, vocab: int) -> np.ndarray:
    """``symbols + [SEP] + symbols`` with the separator at id ``vocab - 1``."""
    s = np.asarray(symbols, dtype=np.int64)
    return np.concatenate([s, [vocab - 1], s])


def gen_copy_batch(vocab: int, m: int, batch: int, seed: int, index: int = 0,
                   stream: int = TRAIN_STREAM, seq_len: int | None = None):
    """Copy-task batch ``(tokens, mask)``, both ``(batch, 2m + 1)``.

    Symbols are uniform over ``0 .. vocab - 2``; ``mask`` marks the trailing
    ``m`` positions (the copied half).  Identical ``(stream, seed, index)``
    always yields the identical batch.
    """
    if vocab < 3:
        raise InvalidConfigurationError(f"copy task needs vocab >= 3, got {vocab}")
    if m < 1 or batch < 1:
        raise InvalidConfigurationError("copy task needs m >= 1 and batch >= 1")
    length = 2 * m + 1
    if seq_len is not None and length > seq_len:
        raise InvalidConfigurationError(f"copy sequence length 2*{m}+1={length} exceeds model.seq_len={seq_len}")
    sym = _rng(stream, seed, index).integers(0, vocab - 1, size=(batch, m))
    tokens = np.concatenate([sym, np.full((batch, 1), vocab - 1), sym], axis=1)
    mask = np.zeros((batch, length), dtype=bool)
    mask[:, m + 1:] = True
    return tokens, mask


def next_token_targets(tokens, mask):
    """Shift to next-token form: position ``t`` is scored against token ``t + 1``.

    Returns ``(targets, loss_mask)`` shaped like ``tokens``; the last
    position has no successor and is never scored.
    """
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    targets = np.zeros_like(tokens)
    targets[..., :-1] = tokens[..., 1:]
    loss_mask = np.zeros_like(mask)
    loss_mask[..., :-1] = mask[..., 1:]
    return targets, loss_mask


@dataclass(frozen=True)
class CharCorpus:
    train: np.ndarray
    val: np.ndarray
    vocab: tuple            # byte values, id order
    unk_id: int

    @property
    def vocab_size(self) -> int:
        return len(self.vocab) + 1

    def decode(self, ids) -> bytes:
        table = list(self.vocab)
        return bytes(table[i] for i in np.asarray(ids).reshape(-1) if i != self.unk_id)


def load_char_corpus(path, min_bytes: int = 10_000, train_fraction: float = 0.9) -> CharCorpus:
    """Byte-level corpus with a contiguous train/val split.

    The vocabulary is the sorted set of bytes seen in the train split;
    validation bytes outside it map to ``unk_id = len(vocab)``.
    """
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IngestionError(f"cannot read corpus {path}: {exc}") from exc
    if len(raw) < min_bytes:
        raise IngestionError(f"corpus {path} has {len(raw)} bytes, need at least {min_bytes}")
    try:
        raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise IngestionError(f"corpus {path} is not valid UTF-8: {exc}") from exc
    data = np.frombuffer(raw, dtype=np.uint8)
    cut = int(round(len(data) * train_fraction))
    if len(data) > 1:
        cut = min(max(cut, 1), len(data) - 1)
    vocab = tuple(int(b) for b in np.unique(data[:cut]))
    lookup = np.full(256, len(vocab), dtype=np.int64)
    lookup[list(vocab)] = np.arange(len(vocab))
    ids = lookup[data]
    return CharCorpus(train=ids[:cut], val=ids[cut:], vocab=vocab, unk_id=len(vocab))


def char_lm_batch(ids: np.ndarray, seq_len: int, batch: int, seed: int, index: int = 0,
                  stream: int = TRAIN_STREAM):
    """Random contiguous windows of ``seq_len`` ids with every position scored."""
    if len(ids) < seq_len:
        raise InvalidConfigurationError(f"split has {len(ids)} ids, shorter than seq_len={seq_len}")
    starts = _rng(stream, seed, index).integers(0, len(ids) - seq_len + 1, size=batch)
    tokens = np.stack([ids[s:s + seq_len] for s in starts])
    return tokens, np.ones_like(tokens, dtype=bool)
