"""Synthetic multi-class benchmarks and a versioned on-disk dataset format.

Two generators are provided:

* a Gaussian mixture with uniform labels, where the exact posterior is a
  linear softmax whose weights have a closed form (``bayes_linear_params``),
  useful as an absolute quality reference;
* a harder nonlinear task where class centroids plus Gaussian noise are pushed
  through a fixed random two-layer network, producing heavily overlapping
  clusters.

Datasets are stored as a text header line followed by raw little-endian
binary payloads::

    TAPASDS v1 <n_classes> <dim> <count>\\n
    labels   int64[count]
    x        float64[count * dim]   (row major)
    freqs    float64[n_classes]

Both generators split their seed by purpose (centroids / generator weights /
example stream), so the "train" and "test" parts share the same mixture while
drawing disjoint example streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Array, Rng, relu

_MAGIC = "TAPASDS"
_VERSION = "v1"


class DatasetFormatError(ValueError):
    """Raised when a dataset file fails structural validation."""


@dataclass(frozen=True)
class GaussianMixtureSpec:
    """Gaussian mixture with centroids drawn from N(0, (scale^2 / dim) I)."""

    n_classes: int
    dim: int
    centroid_scale: float
    seed: int

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.dim < 1:
            raise ValueError("dim must be at least 1")
        if self.centroid_scale <= 0:
            raise ValueError("centroid scale must be positive")


@dataclass(frozen=True)
class NonlinearGenSpec:
    """Centroid-plus-noise inputs pushed through a fixed random ReLU network.

    ``noise_dim`` may be 0, in which case every example of a class collapses
    to the same point (useful for sanity checks).
    """

    n_classes: int
    centroid_dim: int
    noise_dim: int
    hidden_dim: int
    out_dim: int
    noise_sigma: float = 1.0
    centroid_scale: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if min(self.centroid_dim, self.hidden_dim, self.out_dim) < 1:
            raise ValueError("dims must be at least 1")
        if self.noise_dim < 0:
            raise ValueError("noise_dim must be non-negative")
        if self.noise_sigma <= 0:
            raise ValueError("noise sigma must be positive")
        if self.centroid_scale <= 0:
            raise ValueError("centroid scale must be positive")


@dataclass(eq=False)
class Dataset:
    """Feature matrix, labels, and the empirical label frequency table."""

    x: Array  # (count, dim) float64
    y: Array  # (count,) int64 in [0, n_classes)
    n_classes: int
    label_frequencies: Array  # (n_classes,), sums to 1

    @property
    def count(self) -> int:
        return int(self.y.size)

    @property
    def dim(self) -> int:
        return int(self.x.shape[1])

    @classmethod
    def from_examples(cls, x: Array, y: Array, n_classes: int) -> "Dataset":
        x = np.ascontiguousarray(x, dtype=np.float64)
        y = np.ascontiguousarray(y, dtype=np.int64)
        freqs = np.bincount(y, minlength=n_classes) / y.size
        ds = cls(x=x, y=y, n_classes=int(n_classes), label_frequencies=freqs)
        ds.validate()
        return ds

    def validate(self) -> None:
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.size:
            raise ValueError("examples are malformed")
        if self.y.size == 0:
            raise ValueError("dataset is empty")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise ValueError("label out of range")
        if not np.all(np.isfinite(self.x)):
            raise ValueError("non-finite feature value")
        if self.label_frequencies.shape != (self.n_classes,):
            raise ValueError("frequency table has wrong length")
        if abs(float(self.label_frequencies.sum()) - 1.0) > 1e-12:
            raise ValueError("frequencies must sum to 1")

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.label_frequencies, other.label_frequencies)
        )


def _draw_centroids(rng: Rng, n_classes: int, dim: int, scale: float) -> Array:
    return rng.gen.standard_normal((n_classes, dim)) * (scale / math.sqrt(dim))


def gen_linear_dataset(
    spec: GaussianMixtureSpec, count: int, part: str = "train"
) -> tuple[Dataset, Array]:
    """Sample ``count`` examples: uniform label, then x ~ N(centroid, I).

    Returns the dataset and the (n_classes, dim) centroid matrix. ``part``
    selects the example stream; centroids depend only on the spec seed.
    """
    if count < 1:
        raise ValueError("count must be positive")
    root = Rng(spec.seed)
    centroids = _draw_centroids(root.split("centroids"), spec.n_classes, spec.dim, spec.centroid_scale)
    ex = root.split(part)
    y = ex.gen.integers(0, spec.n_classes, size=count)
    x = centroids[y] + ex.gen.standard_normal((count, spec.dim))
    return Dataset.from_examples(x, y, spec.n_classes), centroids


def bayes_linear_params(centroids: Array, sigma: float = 1.0) -> tuple[Array, Array]:
    """Exact posterior weights for the mixture: w_j = mu_j / sigma^2, b_j = -|mu_j|^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu = np.asarray(centroids, dtype=np.float64)
    w = mu / sigma**2
    b = -np.sum(mu**2, axis=1) / (2 * sigma**2)
    return w, b


def gen_nonlinear_dataset(spec: NonlinearGenSpec, count: int, part: str = "train") -> Dataset:
    """Sample from the fixed random generator network.

    Per example: uniform label y, noise z ~ N(0, sigma^2 I), input
    [centroid_y, z] mapped through Linear -> ReLU -> Linear. Generator weights
    are Gaussian with variance 1/fan_in per layer and depend only on the seed.
    """
    if count < 1:
        raise ValueError("count must be positive")
    root = Rng(spec.seed)
    centroids = _draw_centroids(
        root.split("centroids"), spec.n_classes, spec.centroid_dim, spec.centroid_scale
    )
    gw = root.split("generator")
    in_dim = spec.centroid_dim + spec.noise_dim
    w1 = gw.gen.standard_normal((spec.hidden_dim, in_dim)) / math.sqrt(in_dim)
    w2 = gw.gen.standard_normal((spec.out_dim, spec.hidden_dim)) / math.sqrt(spec.hidden_dim)
    ex = root.split(part)
    y = ex.gen.integers(0, spec.n_classes, size=count)
    z = ex.gen.standard_normal((count, spec.noise_dim)) * spec.noise_sigma
    xt = np.concatenate([centroids[y], z], axis=1)
    x = relu(xt @ w1.T) @ w2.T
    return Dataset.from_examples(x, y, spec.n_classes)


def save(ds: Dataset, path) -> None:
    """Write the dataset in the TAPASDS v1 container format."""
    ds.validate()
    header = f"{_MAGIC} {_VERSION} {ds.n_classes} {ds.dim} {ds.count}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(ds.y, dtype="<i8").tobytes())
        fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.label_frequencies, dtype="<f8").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise DatasetFormatError(f"truncated payload while reading {what}")
    return buf


def load(path) -> Dataset:
    """Read a TAPASDS v1 file, verifying header, sizes, and label range."""
    with open(Path(path), "rb") as fh:
        header = fh.readline(256).decode("ascii", errors="replace").rstrip("\n")
        parts = header.split(" ")
        if len(parts) != 5 or parts[0] != _MAGIC:
            raise DatasetFormatError(f"malformed header: {header!r}")
        if parts[1] != _VERSION:
            raise DatasetFormatError(f"version mismatch: got {parts[1]!r}, expected {_VERSION!r}")
        try:
            n_classes, dim, count = (int(p) for p in parts[2:])
        except ValueError as exc:
            raise DatasetFormatError(f"malformed header: {header!r}") from exc
        if n_classes < 1 or dim < 1 or count < 1:
            raise DatasetFormatError(f"malformed header: {header!r}")
        y = np.frombuffer(_read_exact(fh, 8 * count, "labels"), dtype="<i8").astype(np.int64)
        x = np.frombuffer(_read_exact(fh, 8 * count * dim, "features"), dtype="<f8")
        x = x.astype(np.float64).reshape(count, dim)
        freqs = np.frombuffer(_read_exact(fh, 8 * n_classes, "frequencies"), dtype="<f8")
        freqs = freqs.astype(np.float64)
        if fh.read(1):
            raise DatasetFormatError("trailing bytes after payload")
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise DatasetFormatError("label out of range for header class count")
    ds = Dataset(x=x, y=y, n_classes=n_classes, label_frequencies=freqs)
    ds.validate()
    return ds
