"""Two-pass adaptive negative sampling.

Pass one draws a presample of size min(r*n + extra, V) from the squashed
label distribution, without replacement and independent of the model. Pass
two scores every presample candidate against the current batch and keeps the
top n, which concentrates the final sample on hard negatives.

The per-candidate score is log sum_i exp(logit(x_i, y) / tau) over the
batch, a monotone transform of the summed-exponential form, so the argmax
is identical while staying overflow-safe. Lower temperatures push the
selection toward candidates that are the single best match for some batch
element; tau can be decayed over training steps.

When batch positives are passed in they are removed from the draw and the
pool is cut back to the first r*n surviving candidates in draw order. The
draw is oversized by the batch size beforehand, so the pool stays at full
size r*n unless the vocabulary itself runs out; a prefix of a Gumbel
without-replacement draw is again such a draw, so the pool is distributed
exactly like r*n draws from the squashed distribution restricted to
non-positive labels.

With r = 1 the pool therefore has size n and the second pass keeps all of
it: plain sampled softmax with positive-free negatives. The training loop
uses exactly this code path for its non-adaptive baseline.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .model import LabelEmbeddingTable, candidate_logits
from .numerics import Array, Rng, log_sum_exp
from .sampler import CandidateSet, SamplingDistribution, sample_ranked


@dataclass(frozen=True)
class TapasConfig:
    """Knobs of the two-pass sampler.

    n: final negative count per step. r: presample factor (the pool holds
    r*n candidates after positive exclusion). tau0, tau_decay, tau_min
    define the temperature schedule max(tau_min, tau0 * tau_decay**step).
    """

    n: int
    r: int = 1
    tau0: float = 1.0
    tau_decay: float = 1.0
    tau_min: float = 0.01

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.r < 1:
            raise ValueError(f"presample factor r must be >= 1, got {self.r}")
        if not self.tau0 > 0:
            raise ValueError(f"tau0 must be positive, got {self.tau0}")
        if not 0 < self.tau_decay <= 1:
            raise ValueError(f"tau_decay must be in (0, 1], got {self.tau_decay}")
        if not self.tau_min > 0:
            raise ValueError(f"tau_min must be positive, got {self.tau_min}")


def temperature_at(cfg: TapasConfig, step: int) -> float:
    """Scheduled temperature max(tau_min, tau0 * tau_decay**step)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return max(cfg.tau_min, cfg.tau0 * cfg.tau_decay**step)


def candidate_scores(phi: Array, emb: LabelEmbeddingTable, ids: Array, tau: float) -> Array:
    """Batch-aggregated score per candidate id.

    score(y) = log sum_{i in batch} exp(logit(x_i, y) / tau), using the
    model logit (inner product plus label bias when present).
    """
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    logits = candidate_logits(phi, emb, ids)
    return log_sum_exp(logits / tau, axis=0)


def top_n_by_score(ids: Array, scores: Array, n: int) -> Array:
    """n ids with the largest scores, ties to the smaller id, sorted ascending."""
    order = np.lexsort((ids, -scores))[:n]
    return np.sort(ids[order])


def adaptive_pass(
    phi: Array, presample: CandidateSet, emb: LabelEmbeddingTable, n: int, tau: float
) -> CandidateSet:
    """Keep the n highest-scoring presample candidates for this batch."""
    if n > len(presample):
        raise ValueError(f"cannot select {n} from a presample of {len(presample)}")
    scores = candidate_scores(phi, emb, presample.labels, tau)
    return CandidateSet(labels=top_n_by_score(presample.labels, scores, n), origin="final")


SelectFn = Callable[[Array, CandidateSet, LabelEmbeddingTable, int, float], CandidateSet]


def two_pass_sample(
    phi: Array,
    dist: SamplingDistribution,
    emb: LabelEmbeddingTable,
    cfg: TapasConfig,
    step: int,
    rng: Rng,
    positives: Array | None = None,
    select: SelectFn | None = None,
) -> CandidateSet:
    """Full two-pass draw: presample from dist, then adaptive top-n.

    phi holds the encoded batch contexts (B x d). positives, when given,
    are batch labels to exclude; the draw is enlarged by their count and
    then cut back to r*n candidates after removing them, so the pool keeps
    its nominal size whenever the vocabulary allows. select replaces the
    exact adaptive pass (the sharded variant plugs in here); it receives
    (phi, pool, emb, n_eff, tau).
    """
    if select is None:
        select = adaptive_pass
    tau = temperature_at(cfg, step)
    extra = 0 if positives is None else int(np.asarray(positives).size)
    drawn = sample_ranked(dist, cfg.r * cfg.n + extra, rng)
    if extra:
        drawn = drawn[~np.isin(drawn, np.asarray(positives, dtype=np.int64))]
    pool = np.sort(drawn[: cfg.r * cfg.n])
    n_eff = min(cfg.n, pool.size)
    return select(phi, CandidateSet(labels=pool, origin="presample"), emb, n_eff, tau)
