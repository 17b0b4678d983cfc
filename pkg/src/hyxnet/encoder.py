"""Stateless encoding of DNS events into bucketed token sequences and standardized numerics."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

SEQ_LEN = 15
NUM_BUCKETS = 2**15
PAD = 0

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK64
    return h


def bucketize(label: str, num_buckets: int = NUM_BUCKETS) -> int:
    """Map a domain label to a bucket id in ``[1, num_buckets - 1]``; id 0 is the pad token."""
    if not label:
        raise ValueError("cannot bucketize an empty label")
    return fnv1a_64(label.lower().encode("utf-8")) % (num_buckets - 1) + 1


def tokenize(qname: str, seq_len: int = SEQ_LEN, num_buckets: int = NUM_BUCKETS) -> np.ndarray:
    """Left-padded bucket ids for the dot-separated labels of ``qname``.

    Names with more than ``seq_len`` labels keep their right-most labels.
    """
    labels = [p for p in qname.split(".") if p]
    if not labels:
        raise ValueError(f"qname {qname!r} has no labels")
    labels = labels[-seq_len:]
    out = np.zeros(seq_len, dtype=np.int32)
    out[seq_len - len(labels) :] = [bucketize(p, num_buckets) for p in labels]
    return out


def tokenize_many(qnames: Sequence[str], seq_len: int = SEQ_LEN, num_buckets: int = NUM_BUCKETS) -> np.ndarray:
    out = np.zeros((len(qnames), seq_len), dtype=np.int32)
    for i, q in enumerate(qnames):
        out[i] = tokenize(q, seq_len, num_buckets)
    return out


@dataclass(frozen=True, eq=False)
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray
    names: Optional[tuple[str, ...]] = None
    # indices whose variance fell under the guard and were given unit std
    constant: tuple[int, ...] = ()

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).copy()
        std = np.asarray(self.std, dtype=np.float64).copy()
        if mean.ndim != 1 or mean.shape != std.shape:
            raise ValueError(f"mean/std shape mismatch: {mean.shape} vs {std.shape}")
        if not np.all(std > 0):
            raise ValueError("scaler std entries must be strictly positive")
        mean.flags.writeable = False
        std.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)
        if self.names is not None:
            names = tuple(self.names)
            if len(names) != mean.size:
                raise ValueError(f"{len(names)} feature names for {mean.size} features")
            object.__setattr__(self, "names", names)

    @property
    def d_n(self) -> int:
        return self.mean.size


def fit_scaler(train_numerics, names: Optional[Sequence[str]] = None, eps: float = 1e-8) -> FeatureScaler:
    x = np.asarray(train_numerics, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an N x d matrix with N >= 2, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite entries in training numerics")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    guarded = std < eps
    std[guarded] = 1.0
    constant = tuple(int(i) for i in np.flatnonzero(guarded))
    return FeatureScaler(mean, std, None if names is None else tuple(names), constant)


def transform(numerics, scaler: FeatureScaler) -> np.ndarray:
    """Standardize a vector (or a batch of row vectors) with fitted statistics."""
    x = np.asarray(numerics, dtype=np.float64)
    if x.shape[-1] != scaler.d_n:
        raise ValueError(f"expected {scaler.d_n} numeric features, got {x.shape[-1]}")
    return (x - scaler.mean) / scaler.std
