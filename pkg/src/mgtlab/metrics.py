"""Effective rank, rank-decay statistics, gate statistics, synergy and accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, InvalidConfigurationError
from .linalg import singular_values_batch
from .tensor import Tensor

SV_CUTOFF = 1e-12


@dataclass(frozen=True)
class RankProfile:
    ranks: tuple
    preservation_ratio: float
    decay_rate: float

    @classmethod
    def from_ranks(cls, ranks) -> "RankProfile":
        r = np.asarray(ranks, dtype=np.float64)
        if r.size < 2:
            raise InvalidConfigurationError("a rank profile needs at least 2 layers")
        if np.any(r <= 0):
            raise DegenerateInputError("effective ranks must be positive to take logs")
        layers = np.arange(r.size, dtype=np.float64)
        slope = np.polyfit(layers, np.log(r), 1)[0]
        return cls(tuple(float(x) for x in r), float(r[-1] / r[0]), float(slope))


@dataclass(frozen=True)
class BetaStats:
    mean: tuple
    var: tuple
    neg_frac: tuple

    def __len__(self):
        return len(self.mean)


def _entropy_rank(sv: np.ndarray) -> np.ndarray:
    smax = sv[..., :1]
    if np.any(smax <= 0):
        raise DegenerateInputError("effective rank is undefined for an all-zero matrix")
    kept = np.where(sv >= SV_CUTOFF * smax, sv, 0.0)
    p = kept / kept.sum(axis=-1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return np.exp(-terms.sum(axis=-1)) / sv.shape[-1]


def effective_rank(X) -> float:
    """``exp(H(sigma_hat)) / min(S, D)`` with natural-log Shannon entropy.

    Singular values below ``1e-12 * sigma_max`` are dropped before normalising.
    """
    Xd = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if Xd.ndim != 2:
        raise DegenerateInputError(f"effective_rank expects an (S, D) matrix, got {Xd.shape}")
    return float(_entropy_rank(singular_values_batch(Xd)))


def effective_rank_batch(X) -> np.ndarray:
    """Effective rank of every ``(S, D)`` slice of ``(..., S, D)``."""
    return _entropy_rank(singular_values_batch(X))


def rank_profile(states) -> RankProfile:
    """Per-layer effective rank averaged over the batch, plus ratio and log-slope.

    ``states`` is a sequence of hidden states (``(S, D)`` or ``(B, S, D)``),
    first entry being the pre-block embedding.
    """
    if len(states) < 2:
        raise InvalidConfigurationError("rank_profile needs at least 2 layers")
    ranks = [float(np.mean(effective_rank_batch(np.asarray(s)))) for s in states]
    return RankProfile.from_ranks(ranks)


def synergy_coefficient(loss_base: float, loss_mhc: float, loss_ddl: float, loss_mgt: float) -> float:
    """Combined-model gain minus the two single-component gains."""
    return (loss_base - loss_mgt) - (loss_base - loss_mhc) - (loss_base - loss_ddl)


def beta_stats(traces, layers=None) -> BetaStats:
    """Mean, variance and negative fraction of gate values per layer.

    Blocks sharing a ``layer_index`` (the attention and FFN halves of one
    layer) are pooled, as are all batch entries.
    """
    pooled: dict[int, list] = {}
    for tr in traces:
        if tr.beta_values is None:
            raise InvalidConfigurationError("beta_stats needs traces from a DDL variant (no gate values found)")
        pooled.setdefault(tr.layer_index, []).append(np.asarray(tr.beta_values).reshape(-1))
    if not pooled:
        raise InvalidConfigurationError("beta_stats received no traces")
    keys = sorted(pooled) if layers is None else list(layers)
    means, vars_, negs = [], [], []
    for k in keys:
        b = np.concatenate(pooled[k])
        means.append(float(b.mean()))
        vars_.append(float(b.var()))
        negs.append(float(np.mean(b < 0)))
    return BetaStats(tuple(means), tuple(vars_), tuple(negs))


def copy_accuracy(logits, targets, mask) -> float:
    """Fraction of masked positions whose argmax prediction equals the target."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    z = z.reshape(-1, z.shape[-1])
    t = np.asarray(targets).reshape(-1)
    m = np.asarray(mask, dtype=bool).reshape(-1)
    if m.sum() == 0:
        raise InvalidConfigurationError("copy_accuracy: mask selects no positions")
    return float(np.mean(np.argmax(z, axis=1)[m] == t[m]))


def sample_variance(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.var(ddof=1)) if v.size > 1 else 0.0


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan
    return float(v.mean()), math.sqrt(sample_variance(v))
