"""Softmax models with hand-derived gradients.

Two context encoders (linear and one-hidden-layer MLP with ReLU) map inputs
to d-dimensional feature vectors. A label embedding table holds one vector
per class, with an optional per-class bias. Logits are inner products
``phi(x) . psi(y) (+ b_y)``.

Losses come in two flavors: full softmax over all V classes, and sampled
softmax restricted to a candidate set (batch positives plus supplied
negatives, no importance-weight correction by default). Both return the mean
cross entropy over the batch and a :class:`GradientBundle` with encoder
gradients and sparse embedding-row gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Array, Rng, log_sum_exp, relu


@dataclass
class LabelEmbeddingTable:
    """V x d table of class vectors, plus an optional length-V bias."""

    table: Array
    bias: Array | None = None

    def __post_init__(self) -> None:
        self.table = np.asarray(self.table, dtype=np.float64)
        if self.table.ndim != 2:
            raise ValueError(f"embedding table must be 2-d, got shape {self.table.shape}")
        if not np.all(np.isfinite(self.table)):
            raise ValueError("embedding table contains non-finite entries")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64)
            if self.bias.shape != (self.table.shape[0],):
                raise ValueError(
                    f"bias shape {self.bias.shape} does not match {self.table.shape[0]} classes"
                )
            if not np.all(np.isfinite(self.bias)):
                raise ValueError("embedding bias contains non-finite entries")

    @property
    def n_classes(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]


@dataclass
class LinearEncoder:
    """phi(x) = weight @ x + bias, mapping d_in to d_out."""

    weight: Array
    bias: Array


@dataclass
class MlpEncoder:
    """phi(x) = w2 @ relu(w1 @ x + b1) + b2 with one hidden layer."""

    w1: Array
    b1: Array
    w2: Array
    b2: Array


Encoder = LinearEncoder | MlpEncoder


@dataclass
class GradientBundle:
    """Gradients for an encoder plus a sparse slice of embedding rows.

    ``emb_ids`` lists the touched label ids in ascending order; ``emb_table``
    holds one gradient row per id. Rows outside ``emb_ids`` are implicitly
    zero. ``emb_bias`` is None when the table has no bias.
    """

    encoder: dict[str, Array]
    emb_ids: Array
    emb_table: Array
    emb_bias: Array | None

    def add(self, other: "GradientBundle") -> "GradientBundle":
        """Elementwise sum; both bundles must cover the same embedding ids."""
        if not np.array_equal(self.emb_ids, other.emb_ids):
            raise ValueError("cannot add gradient bundles over different embedding ids")
        enc = {k: self.encoder[k] + other.encoder[k] for k in self.encoder}
        bias = None
        if self.emb_bias is not None:
            bias = self.emb_bias + other.emb_bias
        return GradientBundle(enc, self.emb_ids, self.emb_table + other.emb_table, bias)


def init_linear_encoder(d_in: int, d_out: int, rng: Rng) -> LinearEncoder:
    """Weights from N(0, 1/d_out), zero bias."""
    w = rng.gen.standard_normal((d_out, d_in)) / np.sqrt(d_out)
    return LinearEncoder(weight=w, bias=np.zeros(d_out))


def init_mlp_encoder(d_in: int, hidden: int, d_out: int, rng: Rng) -> MlpEncoder:
    """Both weight matrices from N(0, 1/d_out), zero biases."""
    scale = 1.0 / np.sqrt(d_out)
    w1 = rng.gen.standard_normal((hidden, d_in)) * scale
    w2 = rng.gen.standard_normal((d_out, hidden)) * scale
    return MlpEncoder(w1=w1, b1=np.zeros(hidden), w2=w2, b2=np.zeros(d_out))


def init_label_embeddings(
    n_classes: int, dim: int, rng: Rng, with_bias: bool = False
) -> LabelEmbeddingTable:
    """Rows from N(0, 1/dim); bias starts at zero when enabled."""
    table = rng.gen.standard_normal((n_classes, dim)) / np.sqrt(dim)
    bias = np.zeros(n_classes) if with_bias else None
    return LabelEmbeddingTable(table=table, bias=bias)


def encoder_params(enc: Encoder) -> dict[str, Array]:
    """Named parameter arrays, in a fixed order used everywhere."""
    if isinstance(enc, LinearEncoder):
        return {"weight": enc.weight, "bias": enc.bias}
    return {"w1": enc.w1, "b1": enc.b1, "w2": enc.w2, "b2": enc.b2}


def encode_batch(enc: Encoder, x: Array) -> Array:
    """Map a batch of inputs (B x d_in) to features (B x d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-d batch, got shape {x.shape}")
    if isinstance(enc, LinearEncoder):
        if x.shape[1] != enc.weight.shape[1]:
            raise ValueError(
                f"input dim {x.shape[1]} does not match encoder dim {enc.weight.shape[1]}"
            )
        return x @ enc.weight.T + enc.bias
    if x.shape[1] != enc.w1.shape[1]:
        raise ValueError(f"input dim {x.shape[1]} does not match encoder dim {enc.w1.shape[1]}")
    hidden = relu(x @ enc.w1.T + enc.b1)
    return hidden @ enc.w2.T + enc.b2


def encode(enc: Encoder, x: Array) -> Array:
    """Feature vector for a single input."""
    return encode_batch(enc, np.asarray(x, dtype=np.float64)[None, :])[0]


def candidate_logits(phi: Array, emb: LabelEmbeddingTable, ids: Array) -> Array:
    """Logits of the given label ids for pre-encoded contexts (B x |ids|)."""
    logits = phi @ emb.table[ids].T
    if emb.bias is not None:
        logits = logits + emb.bias[ids]
    return logits


def _encoder_backward(enc: Encoder, x: Array, d_phi: Array) -> dict[str, Array]:
    """Gradients of sum_i d_phi[i] . phi(x_i) with respect to encoder params."""
    if isinstance(enc, LinearEncoder):
        return {"weight": d_phi.T @ x, "bias": d_phi.sum(axis=0)}
    pre = x @ enc.w1.T + enc.b1
    hidden = relu(pre)
    d_hidden = (d_phi @ enc.w2) * (pre > 0)
    return {
        "w1": d_hidden.T @ x,
        "b1": d_hidden.sum(axis=0),
        "w2": d_phi.T @ hidden,
        "b2": d_phi.sum(axis=0),
    }


def _softmax_loss_grad(
    enc: Encoder,
    emb: LabelEmbeddingTable,
    x: Array,
    y: Array,
    cand_ids: Array,
    logq: Array | None,
) -> tuple[float, GradientBundle]:
    """Mean cross entropy over the batch with the softmax restricted to
    cand_ids, which must be sorted ascending and contain every batch label.

    When logq is given (length V), logits are shifted by -logq per candidate
    before the softmax, the classic sampled-softmax frequency correction.
    """
    batch = x.shape[0]
    phi = encode_batch(enc, x)
    logits = candidate_logits(phi, emb, cand_ids)
    if logq is not None:
        logits = logits - logq[cand_ids]
    pos = np.searchsorted(cand_ids, y)

    lse = log_sum_exp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(batch), pos]))

    probs = np.exp(logits - lse[:, None])
    d_logits = probs
    d_logits[np.arange(batch), pos] -= 1.0
    d_logits /= batch

    d_table = d_logits.T @ phi
    d_bias = d_logits.sum(axis=0) if emb.bias is not None else None
    d_phi = d_logits @ emb.table[cand_ids]
    return loss, GradientBundle(
        encoder=_encoder_backward(enc, x, d_phi),
        emb_ids=cand_ids,
        emb_table=d_table,
        emb_bias=d_bias,
    )


def _check_batch(emb: LabelEmbeddingTable, x: Array, y: Array) -> tuple[Array, Array]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise ValueError(f"inconsistent batch shapes {x.shape} and {y.shape}")
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    if y.min() < 0 or y.max() >= emb.n_classes:
        raise ValueError("batch label outside [0, n_classes)")
    return x, y


def full_softmax_loss_grad(
    enc: Encoder, emb: LabelEmbeddingTable, x: Array, y: Array
) -> tuple[float, GradientBundle]:
    """Exact softmax cross entropy over all classes.

    Returns the batch-mean loss and gradients; the embedding gradient covers
    every row (emb_ids = 0..V-1).
    """
    x, y = _check_batch(emb, x, y)
    all_ids = np.arange(emb.n_classes, dtype=np.int64)
    return _softmax_loss_grad(enc, emb, x, y, all_ids, logq=None)


def sampled_softmax_loss_grad(
    enc: Encoder,
    emb: LabelEmbeddingTable,
    x: Array,
    y: Array,
    negatives: Array,
    logq: Array | None = None,
) -> tuple[float, GradientBundle]:
    """Softmax restricted to the batch positives plus the given negatives.

    negatives must be disjoint from the batch labels; the candidate set is
    unique(y) union negatives. No frequency correction is applied unless a
    length-V logq vector is passed explicitly.
    """
    x, y = _check_batch(emb, x, y)
    negatives = np.asarray(negatives, dtype=np.int64)
    positives = np.unique(y)
    if np.intersect1d(negatives, positives).size > 0:
        raise ValueError("negatives overlap batch positives")
    cand_ids = np.union1d(positives, negatives)
    if cand_ids.size and (cand_ids[0] < 0 or cand_ids[-1] >= emb.n_classes):
        raise ValueError("candidate label outside [0, n_classes)")
    return _softmax_loss_grad(enc, emb, x, y, cand_ids, logq)


def l2_penalty_grad(
    enc: Encoder, emb: LabelEmbeddingTable, lam: float, emb_ids: Array
) -> tuple[float, GradientBundle]:
    """(lam/2) ||theta||^2 over encoder params and the touched embedding rows.

    The gradient is lam * theta, packaged over the same emb_ids so it can be
    added to a loss bundle directly.
    """
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    emb_ids = np.asarray(emb_ids, dtype=np.int64)
    penalty = 0.0
    enc_grads = {}
    for name, param in encoder_params(enc).items():
        penalty += 0.5 * lam * float(np.sum(param**2))
        enc_grads[name] = lam * param
    rows = emb.table[emb_ids]
    penalty += 0.5 * lam * float(np.sum(rows**2))
    bias_grad = None
    if emb.bias is not None:
        bias_rows = emb.bias[emb_ids]
        penalty += 0.5 * lam * float(np.sum(bias_rows**2))
        bias_grad = lam * bias_rows
    return penalty, GradientBundle(
        encoder=enc_grads, emb_ids=emb_ids, emb_table=lam * rows, emb_bias=bias_grad
    )


def ranked_top_k(logits: Array, k: int) -> Array:
    """Exact top-k ids by descending value, ties to the smaller id."""
    v = logits.shape[0]
    if k == v:
        chosen = np.arange(v, dtype=np.int64)
    else:
        threshold = np.partition(logits, v - k)[v - k]
        greater = np.flatnonzero(logits > threshold)
        equal = np.flatnonzero(logits == threshold)
        chosen = np.concatenate([greater, equal[: k - greater.size]])
    order = np.lexsort((chosen, -logits[chosen]))
    return chosen[order].astype(np.int64)


def top_k_predict(enc: Encoder, emb: LabelEmbeddingTable, x: Array, k: int) -> Array:
    """Top-k label ids for one input, best first."""
    if not 1 <= k <= emb.n_classes:
        raise ValueError(f"k must be in [1, {emb.n_classes}], got {k}")
    phi = encode(enc, x)
    logits = candidate_logits(phi[None, :], emb, np.arange(emb.n_classes))[0]
    return ranked_top_k(logits, k)


def top_k_predict_batch(enc: Encoder, emb: LabelEmbeddingTable, x: Array, k: int) -> Array:
    """Row-wise top-k over the full vocabulary; returns a B x k id matrix."""
    if not 1 <= k <= emb.n_classes:
        raise ValueError(f"k must be in [1, {emb.n_classes}], got {k}")
    phi = encode_batch(enc, x)
    logits = candidate_logits(phi, emb, np.arange(emb.n_classes))
    out = np.empty((x.shape[0], k), dtype=np.int64)
    for i in range(x.shape[0]):
        out[i] = ranked_top_k(logits[i], k)
    return out


# ---------------------------------------------------------------------------
# Checkpoint container: "TAPASCKPT v1 <count>" header, then one line per
# array with its name and shape, then the raw little-endian float64 payloads
# concatenated in the same order.

_CKPT_MAGIC = "TAPASCKPT"
_CKPT_VERSION = "v1"


class CheckpointFormatError(ValueError):
    """Raised when a checkpoint file is malformed."""


def save_checkpoint(path, arrays: dict[str, Array]) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{_CKPT_MAGIC} {_CKPT_VERSION} {len(arrays)}\n".encode("ascii"))
        for name, arr in arrays.items():
            if " " in name or not name:
                raise ValueError(f"bad array name {name!r}")
            shape = " ".join(str(s) for s in np.asarray(arr).shape)
            fh.write(f"{name} {shape}\n".encode("ascii"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> dict[str, Array]:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        parts = header.split(" ")
        if len(parts) != 3 or parts[0] != _CKPT_MAGIC:
            raise CheckpointFormatError(f"bad checkpoint header {header!r}")
        if parts[1] != _CKPT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {parts[1]!r}")
        try:
            count = int(parts[2])
        except ValueError:
            raise CheckpointFormatError(f"bad checkpoint header {header!r}") from None
        shapes: list[tuple[str, tuple[int, ...]]] = []
        for _ in range(count):
            line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
            fields = line.split(" ")
            if not fields or not fields[0]:
                raise CheckpointFormatError("truncated shape table")
            try:
                shape = tuple(int(s) for s in fields[1:])
            except ValueError:
                raise CheckpointFormatError(f"bad shape line {line!r}") from None
            shapes.append((fields[0], shape))
        arrays: dict[str, Array] = {}
        for name, shape in shapes:
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise CheckpointFormatError(f"truncated payload while reading {name!r}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointFormatError("trailing bytes after checkpoint payload")
    return arrays


def model_arrays(enc: Encoder, emb: LabelEmbeddingTable) -> dict[str, Array]:
    """Flatten a model into named arrays for checkpointing."""
    out = {f"enc.{k}": v for k, v in encoder_params(enc).items()}
    out["emb.table"] = emb.table
    if emb.bias is not None:
        out["emb.bias"] = emb.bias
    return out


def model_from_arrays(arrays: dict[str, Array]) -> tuple[Encoder, LabelEmbeddingTable]:
    """Rebuild (encoder, embeddings) from checkpoint arrays."""
    if "enc.w1" in arrays:
        enc: Encoder = MlpEncoder(
            w1=arrays["enc.w1"], b1=arrays["enc.b1"], w2=arrays["enc.w2"], b2=arrays["enc.b2"]
        )
    elif "enc.weight" in arrays:
        enc = LinearEncoder(weight=arrays["enc.weight"], bias=arrays["enc.bias"])
    else:
        raise CheckpointFormatError("checkpoint holds no recognizable encoder")
    if "emb.table" not in arrays:
        raise CheckpointFormatError("checkpoint holds no embedding table")
    emb = LabelEmbeddingTable(table=arrays["emb.table"], bias=arrays.get("emb.bias"))
    return enc, emb


def save_model(path, enc: Encoder, emb: LabelEmbeddingTable) -> None:
    save_checkpoint(path, model_arrays(enc, emb))


def load_model(path) -> tuple[Encoder, LabelEmbeddingTable]:
    return model_from_arrays(load_checkpoint(path))
