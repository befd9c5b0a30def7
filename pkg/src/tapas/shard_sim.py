"""In-process simulation of sharded candidate selection.

The label vocabulary is split into m balanced random shards, mimicking a
set of parameter servers that each host one slice of the embedding table.
Each shard runs the adaptive pass over its own presample slice and returns
its local top candidates; the union approximates the exact global top-n.
Selection quality (recall against the exact set) and communication volume
are the two quantities of interest; no actual networking is involved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import LabelEmbeddingTable
from .numerics import Array, Rng
from .sampler import CandidateSet
from .two_pass import candidate_scores, top_n_by_score


@dataclass(frozen=True)
class ShardPartition:
    """Assignment of each label id to one of m shards.

    assignment[z] is the shard of label z. Shard sizes differ by at most
    one, matching a uniformly random balanced partition.
    """

    m: int
    assignment: Array

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "assignment", np.asarray(self.assignment, dtype=np.int64).reshape(-1)
        )
        if self.m < 1:
            raise ValueError(f"shard count must be >= 1, got {self.m}")
        if self.assignment.size < self.m:
            raise ValueError(f"cannot split {self.assignment.size} labels over {self.m} shards")
        if self.assignment.min() < 0 or self.assignment.max() >= self.m:
            raise ValueError("shard id outside [0, m)")
        sizes = np.bincount(self.assignment, minlength=self.m)
        if sizes.max() - sizes.min() > 1:
            raise ValueError(f"unbalanced partition, shard sizes {sizes.tolist()}")

    @property
    def n_labels(self) -> int:
        return self.assignment.size

    def shard_sizes(self) -> Array:
        return np.bincount(self.assignment, minlength=self.m)


def partition_vocab(n_labels: int, m: int, rng: Rng) -> ShardPartition:
    """Uniformly random balanced partition of [n_labels] into m shards."""
    if not 1 <= m <= n_labels:
        raise ValueError(f"shard count must be in [1, {n_labels}], got {m}")
    perm = rng.gen.permutation(n_labels)
    assignment = np.empty(n_labels, dtype=np.int64)
    assignment[perm] = np.arange(n_labels, dtype=np.int64) % m
    return ShardPartition(m=m, assignment=assignment)


def sharded_adaptive_pass(
    phi: Array,
    presample: CandidateSet,
    emb: LabelEmbeddingTable,
    part: ShardPartition,
    n: int,
    tau: float,
) -> CandidateSet:
    """Union of per-shard local top candidates, truncated to n globally.

    Each shard keeps the top ceil(n/m) of its presample slice by the same
    score as the exact adaptive pass (exactly n/m when divisible). When the
    union exceeds n it is cut back to the global top n by score; a shard
    whose slice is smaller than its quota simply returns everything, so the
    result can fall short of n (callers observe the shortfall as len < n).
    """
    if n > len(presample):
        raise ValueError(f"cannot select {n} from a presample of {len(presample)}")
    labels = presample.labels
    scores = candidate_scores(phi, emb, labels, tau)
    quota = math.ceil(n / part.m)
    shard_of = part.assignment[labels]
    kept = []
    for j in range(part.m):
        in_shard = shard_of == j
        kept.append(top_n_by_score(labels[in_shard], scores[in_shard], quota))
    union = np.concatenate(kept)
    if union.size > n:
        pos = np.searchsorted(labels, union)
        union = top_n_by_score(union, scores[pos], n)
    return CandidateSet(labels=np.sort(union), origin="final")


def recall_vs_exact(approx: CandidateSet, exact: CandidateSet) -> float:
    """|approx intersect exact| / |exact|."""
    if len(exact) == 0:
        raise ValueError("exact candidate set is empty")
    hits = np.intersect1d(approx.labels, exact.labels, assume_unique=True).size
    return hits / len(exact)


def comm_cost(
    batch: int, d: int, n: int, r: int, m: int, mode: str
) -> tuple[float, float]:
    """Floats shipped per step as (sent_to_servers, returned_to_worker).

    Label ids count as one float each. Sampling at the servers ("at_ps")
    broadcasts the batch contexts to every shard plus the presample ids and
    gets back only the n selected embeddings. Sampling at the worker
    ("at_worker") sends the presample ids and pulls all r*n embeddings.
    """
    if batch < 0:
        raise ValueError(f"batch must be >= 0, got {batch}")
    if min(d, n, r, m) < 1:
        raise ValueError("d, n, r, m must all be >= 1")
    presample = r * n
    if mode == "at_ps":
        return float(m * batch * d + presample), float(n * d)
    if mode == "at_worker":
        return float(presample), float(presample * d)
    raise ValueError(f"unknown mode {mode!r}, expected 'at_ps' or 'at_worker'")
