"""Ranking metrics, metric series storage, and full-vocabulary evaluation.

precision@k is the fraction of the top k predictions that are true labels.
MAP@k averages precision@k' over the positions k' <= k holding a true
label; with no hit in the top k it is zero. The "kaggle" variant divides
the summed precisions by min(|truth|, k) instead; both coincide for
single-label truth, which is the only case the benchmarks produce.

MetricSeries is an append-only, step-ordered list of records with JSONL
persistence. Timing fields vary run to run, so equality checks take an
ignore list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import Encoder, LabelEmbeddingTable, candidate_logits, encode_batch, ranked_top_k
from .numerics import Array, log_sum_exp

TIMING_KEYS = ("wall_seconds", "steps_per_sec")


def precision_at_k(ranked, truth, k: int) -> float:
    """|top-k of ranked that are in truth| / k."""
    ranked = list(ranked)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds ranking length {len(ranked)}")
    truth = set(int(t) for t in truth)
    return sum(1 for z in ranked[:k] if int(z) in truth) / k


def map_at_k(ranked, truth, k: int, variant: str = "paper") -> float:
    """Mean average precision at k for one ranking.

    variant "paper": average precision@k' over the hit positions k' <= k,
    zero when nothing in the top k is true. variant "kaggle": divide the
    same sum by min(|truth|, k) regardless of how many hits occurred.
    """
    ranked = list(ranked)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > len(ranked):
        raise ValueError(f"k={k} exceeds ranking length {len(ranked)}")
    if variant not in ("paper", "kaggle"):
        raise ValueError(f"unknown MAP variant {variant!r}")
    truth = set(int(t) for t in truth)
    hits = 0
    total = 0.0
    for pos in range(k):
        if int(ranked[pos]) in truth:
            hits += 1
            total += hits / (pos + 1)
    if variant == "paper":
        return total / hits if hits else 0.0
    denom = min(len(truth), k)
    return total / denom if denom else 0.0


def moving_average(series, window: int) -> Array:
    """Trailing mean over up to `window` points; output length is preserved."""
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-d series, got shape {x.shape}")
    csum = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, x.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


@dataclass
class MetricRecord:
    step: int
    values: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.step < 0:
            raise ValueError(f"step must be >= 0, got {self.step}")
        for key, val in self.values.items():
            if not np.isfinite(val):
                raise ValueError(f"metric {key!r} is not finite: {val}")


@dataclass
class MetricSeries:
    records: list[MetricRecord] = field(default_factory=list)

    def append(self, record: MetricRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(
                f"steps must increase: {record.step} after {self.records[-1].step}"
            )
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def steps(self) -> list[int]:
        return [r.step for r in self.records]

    def column(self, key: str) -> Array:
        """Values of one metric across all records holding it."""
        return np.array([r.values[key] for r in self.records if key in r.values])

    def save_jsonl(self, path) -> None:
        with open(path, "w", encoding="ascii") as fh:
            for rec in self.records:
                fh.write(json.dumps({"step": rec.step, **rec.values}, sort_keys=True))
                fh.write("\n")

    @classmethod
    def load_jsonl(cls, path) -> "MetricSeries":
        series = cls()
        with open(path, "r", encoding="ascii") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                step = int(obj.pop("step"))
                series.append(MetricRecord(step=step, values=obj))
        return series

    def values_equal(self, other: "MetricSeries", ignore=TIMING_KEYS) -> bool:
        """Exact equality of steps and metric values, skipping ignored keys."""
        if self.steps() != other.steps():
            return False
        for a, b in zip(self.records, other.records):
            ka = {k: v for k, v in a.values.items() if k not in ignore}
            kb = {k: v for k, v in b.values.items() if k not in ignore}
            if ka != kb:
                return False
        return True


def eval_model(
    enc: Encoder,
    emb: LabelEmbeddingTable,
    x: Array,
    y: Array,
    ks=(1,),
    step: int = 0,
    map_variant: str = "paper",
    chunk: int = 1024,
) -> MetricRecord:
    """Exact full-vocabulary evaluation: P@k, MAP@k, and full softmax loss.

    No sampling is involved; logits over all classes are computed in chunks
    to bound memory. Ranking ties go to the smaller label id. Each example
    has a single true label, for which the two MAP variants agree, so
    map_variant only gets validated here.
    """
    if map_variant not in ("paper", "kaggle"):
        raise ValueError(f"unknown MAP variant {map_variant!r}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] != y.shape[0] or x.shape[0] == 0:
        raise ValueError("evaluation set is empty or mismatched")
    ks = tuple(int(k) for k in ks)
    if any(not 1 <= k <= emb.n_classes for k in ks):
        raise ValueError(f"every k must be in [1, {emb.n_classes}]")
    kmax = max(ks)
    all_ids = np.arange(emb.n_classes)

    count = x.shape[0]
    loss_total = 0.0
    p_hits = {k: 0.0 for k in ks}
    ap_sums = {k: 0.0 for k in ks}
    for lo in range(0, count, chunk):
        xs = x[lo : lo + chunk]
        ys = y[lo : lo + chunk]
        phi = encode_batch(enc, xs)
        logits = candidate_logits(phi, emb, all_ids)
        lse = log_sum_exp(logits, axis=1)
        loss_total += float(np.sum(lse - logits[np.arange(xs.shape[0]), ys]))
        for i in range(xs.shape[0]):
            top = ranked_top_k(logits[i], kmax)
            where = np.flatnonzero(top == ys[i])
            rank = int(where[0]) + 1 if where.size else 0
            for k in ks:
                if rank and rank <= k:
                    p_hits[k] += 1.0
                    ap_sums[k] += 1.0 / rank
    values = {"softmax_loss_full": loss_total / count}
    for k in ks:
        values[f"p_at_{k}"] = p_hits[k] / (k * count)
        values[f"map_at_{k}"] = ap_sums[k] / count
    return MetricRecord(step=step, values=values)
