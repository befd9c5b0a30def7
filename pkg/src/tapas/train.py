"""Minibatch training loop wiring the sampler, models, and evaluation.

Three loss modes: "full" trains with the exact softmax over all classes,
"sampled" draws negatives non-adaptively from the squashed label
distribution (the two-pass path with the presample factor pinned to 1),
and "tapas" runs the full two-pass adaptive selection. Optimization is
plain AdaGrad with sparse row updates for the embedding table.

Batches are consecutive slices of concatenated shuffled epochs, so a run
is a pure function of its config and seed: metric series, sampled
candidate sets, and final parameters are all bit-reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from functools import partial
from typing import Iterator

import numpy as np

from .data_synth import Dataset
from .metrics import MetricSeries, eval_model
from .model import (
    Encoder,
    GradientBundle,
    LabelEmbeddingTable,
    encode_batch,
    encoder_params,
    full_softmax_loss_grad,
    init_label_embeddings,
    init_linear_encoder,
    init_mlp_encoder,
    l2_penalty_grad,
    sampled_softmax_loss_grad,
)
from .numerics import Array, Rng
from .sampler import DEFAULT_ALPHA, build_squashed
from .shard_sim import partition_vocab, recall_vs_exact, sharded_adaptive_pass
from .two_pass import TapasConfig, two_pass_sample

LOSS_MODES = ("full", "sampled", "tapas")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switch: linear or one-hidden-layer MLP encoder."""

    kind: str = "linear"
    emb_dim: int = 50
    hidden: int = 50
    label_bias: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.emb_dim < 1 or self.hidden < 1:
            raise ValueError("emb_dim and hidden must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int
    steps: int
    eval_every: int = 1000
    lr: float = 0.1
    epsilon: float = 1e-8
    l2: float = 0.0
    loss_mode: str = "tapas"
    seed: int = 0
    sampler_alpha: float = DEFAULT_ALPHA
    sampler_beta: float | None = None
    eval_ks: tuple[int, ...] = (1,)
    map_variant: str = "paper"
    logq_correction: bool = False
    record_samples: bool = False

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if not self.lr > 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}, got {self.loss_mode!r}")
        if not self.eval_ks:
            raise ValueError("eval_ks must be nonempty")
        if self.logq_correction and self.loss_mode != "sampled":
            raise ValueError("logq_correction only applies to the sampled baseline")


@dataclass
class AdaGradState:
    """Squared-gradient accumulators, one dense array per parameter."""

    lr: float
    epsilon: float
    acc: dict[str, Array]

    @classmethod
    def for_model(
        cls, enc: Encoder, emb: LabelEmbeddingTable, lr: float, epsilon: float
    ) -> "AdaGradState":
        if not lr > 0 or not epsilon > 0:
            raise ValueError("lr and epsilon must be positive")
        acc = {f"enc.{k}": np.zeros_like(v) for k, v in encoder_params(enc).items()}
        acc["emb.table"] = np.zeros_like(emb.table)
        if emb.bias is not None:
            acc["emb.bias"] = np.zeros_like(emb.bias)
        return cls(lr=lr, epsilon=epsilon, acc=acc)


def adagrad_step(
    state: AdaGradState, enc: Encoder, emb: LabelEmbeddingTable, grads: GradientBundle
) -> None:
    """In-place AdaGrad update: acc += g^2, theta -= lr * g / (sqrt(acc) + eps).

    Embedding rows are updated only where the bundle carries gradients.
    """
    for name, param in encoder_params(enc).items():
        g = grads.encoder[name]
        acc = state.acc[f"enc.{name}"]
        acc += g * g
        param -= state.lr * g / (np.sqrt(acc) + state.epsilon)
    ids = grads.emb_ids
    g = grads.emb_table
    acc_rows = state.acc["emb.table"][ids] + g * g
    state.acc["emb.table"][ids] = acc_rows
    emb.table[ids] -= state.lr * g / (np.sqrt(acc_rows) + state.epsilon)
    if grads.emb_bias is not None:
        gb = grads.emb_bias
        acc_b = state.acc["emb.bias"][ids] + gb * gb
        state.acc["emb.bias"][ids] = acc_b
        emb.bias[ids] -= state.lr * gb / (np.sqrt(acc_b) + state.epsilon)


def _epoch_batches(count: int, batch_size: int, rng: Rng) -> Iterator[Array]:
    """Consecutive index slices of concatenated shuffled epochs."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while buf.size < batch_size:
            buf = np.concatenate([buf, rng.gen.permutation(count)])
        yield buf[:batch_size]
        buf = buf[batch_size:]


@dataclass
class TrainResult:
    series: MetricSeries
    encoder: Encoder
    embeddings: LabelEmbeddingTable
    sample_trace: list[Array] = field(default_factory=list)


def init_model(
    model_cfg: ModelConfig, d_in: int, n_classes: int, rng: Rng
) -> tuple[Encoder, LabelEmbeddingTable]:
    if model_cfg.kind == "linear":
        enc: Encoder = init_linear_encoder(d_in, model_cfg.emb_dim, rng.split("init_enc"))
    else:
        enc = init_mlp_encoder(d_in, model_cfg.hidden, model_cfg.emb_dim, rng.split("init_enc"))
    emb = init_label_embeddings(
        n_classes, model_cfg.emb_dim, rng.split("init_emb"), with_bias=model_cfg.label_bias
    )
    return enc, emb


def run_training(
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    tapas_cfg: TapasConfig,
    dataset: Dataset,
    eval_set: Dataset,
    shards_m: int = 1,
) -> TrainResult:
    """Train for cfg.steps minibatch steps and evaluate periodically.

    Evaluation happens at step 0, every cfg.eval_every steps, and at the
    final step, always on the full eval_set with exact full-vocabulary
    ranking. With shards_m > 1 the adaptive pass runs per shard and each
    eval additionally reports the sharded selection's recall against the
    exact one on the most recent batch.
    """
    if dataset.n_classes != eval_set.n_classes:
        raise ValueError("train and eval sets disagree on the number of classes")
    if dataset.dim != eval_set.dim:
        raise ValueError("train and eval sets disagree on input dimension")
    if shards_m < 1:
        raise ValueError(f"shards_m must be >= 1, got {shards_m}")

    root = Rng(cfg.seed)
    enc, emb = init_model(model_cfg, dataset.dim, dataset.n_classes, root)
    state = AdaGradState.for_model(enc, emb, cfg.lr, cfg.epsilon)

    dist = None
    logq = None
    if cfg.loss_mode != "full":
        dist = build_squashed(
            dataset.label_frequencies, alpha=cfg.sampler_alpha, beta=cfg.sampler_beta
        )
        if cfg.logq_correction:
            logq = dist.log_q
    effective_tapas = tapas_cfg
    if cfg.loss_mode == "sampled":
        effective_tapas = replace(tapas_cfg, r=1)

    partition = None
    select = None
    if shards_m > 1:
        partition = partition_vocab(dataset.n_classes, shards_m, root.split("partition"))
        select = partial(_sharded_select, partition)

    sampling_rng = root.split("sampling")
    diag_rng = root.split("shard_diag")
    batches = _epoch_batches(dataset.count, cfg.batch_size, root.split("shuffle"))

    series = MetricSeries()
    result = TrainResult(series=series, encoder=enc, embeddings=emb)
    start = time.perf_counter()
    train_seconds = 0.0
    last_batch: tuple[Array, Array] | None = None

    def emit(step: int) -> None:
        rec = eval_model(
            enc,
            emb,
            eval_set.x,
            eval_set.y,
            ks=cfg.eval_ks,
            step=step,
            map_variant=cfg.map_variant,
        )
        rec.values["wall_seconds"] = time.perf_counter() - start
        if step > 0:
            rec.values["steps_per_sec"] = step / train_seconds if train_seconds > 0 else 0.0
        if partition is not None and dist is not None and last_batch is not None:
            rec.values["shard_recall"] = _shard_recall_probe(
                enc, emb, dist, effective_tapas, partition, last_batch, step, diag_rng
            )
        series.append(rec)

    emit(0)
    for step in range(cfg.steps):
        tick = time.perf_counter()
        idx = next(batches)
        x, y = dataset.x[idx], dataset.y[idx]
        if cfg.loss_mode == "full":
            _, grads = full_softmax_loss_grad(enc, emb, x, y)
        else:
            phi = encode_batch(enc, x)
            cand = two_pass_sample(
                phi,
                dist,
                emb,
                effective_tapas,
                step,
                sampling_rng,
                positives=y,
                select=select,
            )
            if cfg.record_samples:
                result.sample_trace.append(cand.labels.copy())
            _, grads = sampled_softmax_loss_grad(enc, emb, x, y, cand.labels, logq=logq)
        if cfg.l2 > 0:
            _, l2_grads = l2_penalty_grad(enc, emb, cfg.l2, grads.emb_ids)
            grads = grads.add(l2_grads)
        adagrad_step(state, enc, emb, grads)
        last_batch = (x, y)
        train_seconds += time.perf_counter() - tick
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            emit(done)
    return result


def _sharded_select(partition, phi, pool, emb, n_eff, tau):
    return sharded_adaptive_pass(phi, pool, emb, partition, n_eff, tau)


def _shard_recall_probe(
    enc, emb, dist, tapas_cfg, partition, batch, step, rng: Rng
) -> float:
    """Recall of the sharded selection against the exact adaptive pass,
    measured on the latest training batch with a fresh presample."""
    x, y = batch
    phi = encode_batch(enc, x)
    exact = two_pass_sample(
        phi, dist, emb, tapas_cfg, step, rng.split(f"exact_{step}"), positives=y
    )
    approx = two_pass_sample(
        phi,
        dist,
        emb,
        tapas_cfg,
        step,
        rng.split(f"exact_{step}"),
        positives=y,
        select=partial(_sharded_select, partition),
    )
    if len(exact) == 0:
        return 1.0
    return recall_vs_exact(approx, exact)
