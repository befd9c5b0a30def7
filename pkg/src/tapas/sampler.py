"""Non-adaptive candidate sampling from the squashed empirical distribution.

The first sampling pass draws a candidate pool without replacement from
q_z = max(f_z^alpha, beta) / sum_w max(f_w^alpha, beta), where f is the
empirical label frequency, alpha squashes the head of the distribution and
beta floors the tail so every label keeps positive mass.

Sampling without replacement uses Gumbel-top-k: add i.i.d. standard Gumbel
noise to log q_z and keep the k largest keys. This is O(V + k) per draw,
exactly reproducible under a seeded stream, and never yields duplicates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import Array, Rng

DEFAULT_ALPHA = 0.75


def default_beta(n_classes: int) -> float:
    """Default floor: a tenth of the uniform mass."""
    return 1.0 / (10.0 * n_classes)


@dataclass
class CandidateSet:
    """A set of distinct label ids in canonical (ascending) order.

    ``origin`` records which pass produced it: "presample" for the first
    non-adaptive pool, "final" for the selected negatives.
    """

    labels: Array
    origin: str = "presample"

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise ValueError("candidate labels must be a flat id list")
        if labels.size > 1 and not np.all(np.diff(labels) > 0):
            raise ValueError("candidate labels must be distinct and ascending")
        if self.origin not in ("presample", "final"):
            raise ValueError(f"unknown origin {self.origin!r}")
        self.labels = labels

    def __len__(self) -> int:
        return int(self.labels.size)

    def __contains__(self, label: int) -> bool:
        i = int(np.searchsorted(self.labels, label))
        return i < self.labels.size and self.labels[i] == label


@dataclass(frozen=True)
class SamplingDistribution:
    """Normalized sampling weights over the whole vocabulary."""

    q: Array
    alpha: float
    beta: float
    log_q: Array = field(repr=False, default=None)

    @property
    def n_classes(self) -> int:
        return int(self.q.size)


def build_squashed(freqs, alpha: float = DEFAULT_ALPHA, beta: float | None = None) -> SamplingDistribution:
    """Build q_z proportional to max(f_z^alpha, beta) from empirical frequencies.

    ``freqs`` must be non-negative and sum to 1; ``alpha`` lies in [0, 1];
    ``beta`` must be positive (default: 1 / (10 V)).
    """
    f = np.asarray(freqs, dtype=np.float64)
    if f.ndim != 1 or f.size == 0:
        raise ValueError("frequencies must be a non-empty vector")
    if np.any(f < 0):
        raise ValueError("negative frequency")
    if abs(float(f.sum()) - 1.0) > 1e-9:
        raise ValueError("frequencies must sum to 1")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if beta is None:
        beta = default_beta(f.size)
    if beta <= 0:
        raise ValueError("beta must be positive")
    weights = np.maximum(f**alpha, beta)
    q = weights / weights.sum()
    return SamplingDistribution(q=q, alpha=float(alpha), beta=float(beta), log_q=np.log(q))


def sample_ranked(dist: SamplingDistribution, size: int, rng: Rng) -> Array:
    """Draw min(size, V) distinct labels, returned in draw order.

    Under Gumbel-top-k the i-th returned label is distributed like the i-th
    draw of sequential sampling without replacement, so any prefix of the
    result is itself a valid without-replacement sample from ``dist``.

    When size >= V the pool is the whole vocabulary in id order and no
    randomness is consumed.
    """
    if size < 1:
        raise ValueError("sample size must be at least 1")
    v = dist.n_classes
    k = min(int(size), v)
    if k == v:
        return np.arange(v, dtype=np.int64)
    keys = dist.log_q + rng.gen.gumbel(size=v)
    top = np.argpartition(-keys, k - 1)[:k]
    return top[np.argsort(-keys[top], kind="stable")].astype(np.int64)


def sample_without_replacement(dist: SamplingDistribution, size: int, rng: Rng) -> CandidateSet:
    """Draw min(size, V) distinct labels with marginals following ``dist``.

    Consumes the same random stream as `sample_ranked`; only the id order
    of the result differs (canonical ascending here).
    """
    return CandidateSet(np.sort(sample_ranked(dist, size, rng)), origin="presample")
