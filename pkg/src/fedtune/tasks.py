"""Synthetic classification tasks with analytic gradients, plus the
label-skew partitioner used for heterogeneous federated splits.

The canonical model is softmax regression over a single adapted d x k weight
matrix: logits are ``x @ W_eff`` with no bias, so every adapter identity can
be exercised with exact, cheap gradients. A small two-layer variant (d -> h
ReLU -> k, one adapter per matrix) is included for multi-layer aggregation
tests; it is not used by the acceptance experiments.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .adapters import AdapterState, effective_weight
from .linalg import RngStream, as_matrix

__all__ = [
    "Dataset",
    "SyntheticTaskSpec",
    "PartitionSpec",
    "SoftmaxModel",
    "TwoLayerModel",
    "FeasibilityError",
    "gen_synthetic",
    "loss_and_grad",
    "softmax_deltas",
    "mean_loss_and_grad_w",
    "accuracy",
    "partition",
    "dataset_to_csv",
    "dataset_from_csv",
    "two_layer_loss_and_grads",
]

# Column norm of the base weight w0 (its columns point at the unit class
# prototypes), and the Frobenius norm of the low-rank task shift relative to
# ||w0||_F. Together they fix how good the "pretrained" base is (~0.6-0.9
# fresh accuracy depending on dimension) and how much there is to learn.
W0_COLUMN_NORM = 0.6
SHIFT_TO_BASE_RATIO = 3.0


class FeasibilityError(ValueError):
    """A partition spec demands more samples of some class than exist."""


@dataclass(frozen=True, eq=False)
class Dataset:
    """Feature matrix (n x d) with integer labels in [0, k)."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "x", as_matrix(self.x))
        y = np.asarray(self.y, dtype=np.int64)
        if y.ndim != 1 or y.shape[0] != self.x.shape[0]:
            raise ValueError("labels must be a vector matching the feature rows")
        if y.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if (y < 0).any():
            raise ValueError("labels must be non-negative")
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Generator knobs for a class-conditioned Gaussian task whose labels come
    from a low-rank-shifted linear rule."""

    dim: int
    classes: int
    samples: int
    class_separation: float = 2.0
    label_noise: float = 0.0
    truth_rank: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.classes < 2 or self.samples < 2:
            raise ValueError("need dim >= 1, classes >= 2, samples >= 2")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must be in [0, 1)")
        if self.truth_rank > min(self.dim, self.classes):
            raise ValueError("truth_rank exceeds min(dim, classes)")
        if self.truth_rank < 0:
            raise ValueError("truth_rank must be >= 0")


@dataclass(frozen=True)
class PartitionSpec:
    """Per-client label distributions; clients receive equal sample counts."""

    proportions: tuple[tuple[float, ...], ...]

    def __post_init__(self):
        props = tuple(tuple(float(v) for v in p) for p in self.proportions)
        object.__setattr__(self, "proportions", props)
        if not props:
            raise ValueError("need at least one client")
        k = len(props[0])
        for i, p in enumerate(props):
            if len(p) != k:
                raise ValueError("all proportion vectors must have equal length")
            if any(v < 0 for v in p):
                raise ValueError(f"client {i} has a negative proportion")
            if abs(sum(p) - 1.0) > 1e-9:
                raise ValueError(f"client {i} proportions sum to {sum(p)}, not 1")

    @property
    def n_clients(self) -> int:
        return len(self.proportions)

    @property
    def n_classes(self) -> int:
        return len(self.proportions[0])


@dataclass(frozen=True, eq=False)
class SoftmaxModel:
    """Softmax regression whose weight matrix is an adapter state."""

    state: AdapterState

    @property
    def weight(self) -> np.ndarray:
        return effective_weight(self.state)


@dataclass(frozen=True, eq=False)
class TwoLayerModel:
    """d -> hidden ReLU -> k network with one adapter per weight matrix.

    Layer order is the flatten order: layer 0 first, then layer 1.
    """

    layers: tuple[AdapterState, AdapterState]


def gen_synthetic(spec: SyntheticTaskSpec):
    """Build (train, test, w0, w_star) deterministically from the spec.

    Class prototypes are drawn on the sphere of radius ``class_separation``;
    each sample picks a uniform nominal class and adds unit Gaussian noise to
    that prototype. The base weight w0 points its columns at the (unit)
    prototypes with column norm W0_COLUMN_NORM; the target weight is
    w_star = w0 + S where S is a random rank-``truth_rank`` product rescaled
    to SHIFT_TO_BASE_RATIO * ||w0||_F. Labels are argmax(x @ w_star), then
    flipped to a uniformly random other class with probability
    ``label_noise``. Split is 80/20 train/test.
    """
    d, k, n = spec.dim, spec.classes, spec.samples
    rng = RngStream(spec.seed, "task")

    protos = rng.normal((k, d))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    w0 = protos.T * W0_COLUMN_NORM
    protos = protos * spec.class_separation

    if spec.truth_rank > 0:
        b_star = rng.normal((d, spec.truth_rank))
        a_star = rng.normal((spec.truth_rank, k))
        shift = b_star @ a_star
        shift *= SHIFT_TO_BASE_RATIO * np.linalg.norm(w0) / np.linalg.norm(shift)
        w_star = w0 + shift
    else:
        w_star = w0.copy()

    nominal = rng.integers(0, k, size=n)
    x = protos[nominal] + rng.normal((n, d))
    y = np.argmax(x @ w_star, axis=1)

    if spec.label_noise > 0:
        flip = rng.generator.random(n) < spec.label_noise
        offsets = rng.integers(1, k, size=n)
        y = np.where(flip, (y + offsets) % k, y)

    n_train = int(0.8 * n)
    train = Dataset(x[:n_train], y[:n_train])
    test = Dataset(x[n_train:], y[n_train:])
    return train, test, w0, w_star


def softmax_deltas(model: SoftmaxModel, x: np.ndarray, y: np.ndarray):
    """Batch losses and softmax residuals.

    Returns (losses (n,), deltas (n, k)) where the per-sample weight gradient
    is the outer product x_i^T deltas_i. Softmax uses max-subtraction.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    logits = x @ model.weight
    logits = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(logits).sum(axis=1))
    idx = np.arange(len(y))
    losses = log_z - logits[idx, y]
    deltas = np.exp(logits - log_z[:, None])
    deltas[idx, y] -= 1.0
    return losses, deltas


def loss_and_grad(model: SoftmaxModel, x: np.ndarray, y: int):
    """Cross-entropy loss and d x k weight gradient for a single sample."""
    losses, deltas = softmax_deltas(model, np.atleast_2d(x), [int(y)])
    grad_w = np.outer(np.asarray(x, dtype=np.float64).ravel(), deltas[0])
    return float(losses[0]), grad_w


def mean_loss_and_grad_w(model: SoftmaxModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy and mean weight gradient over a batch."""
    losses, deltas = softmax_deltas(model, x, y)
    n = len(losses)
    return float(losses.mean()), (np.atleast_2d(x).T @ deltas) / n


def accuracy(model: SoftmaxModel, dataset: Dataset) -> float:
    """Fraction of samples whose argmax logit matches the label; argmax ties
    resolve to the lowest class index."""
    if dataset.n < 1:
        raise ValueError("accuracy needs a nonempty dataset")
    pred = np.argmax(dataset.x @ model.weight, axis=1)
    return float(np.mean(pred == dataset.y))


def _integer_counts(p: tuple[float, ...], size: int) -> np.ndarray:
    """Largest-remainder rounding of size * p to integers summing to size."""
    target = np.asarray(p) * size
    counts = np.floor(target).astype(np.int64)
    short = size - int(counts.sum())
    order = np.argsort(-(target - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition(dataset: Dataset, spec: PartitionSpec, seed: int) -> list[Dataset]:
    """Split ``dataset`` into disjoint equal-size client shards matching each
    client's label distribution to within one sample per class.

    Sampling is without replacement and deterministic in ``seed``. Raises
    FeasibilityError naming the first class whose demand exceeds supply.
    """
    k = spec.n_classes
    if dataset.y.max() >= k:
        raise ValueError("dataset has labels outside the partition spec's classes")
    size = dataset.n // spec.n_clients
    if size < 1:
        raise ValueError("fewer samples than clients")

    counts = [_integer_counts(p, size) for p in spec.proportions]
    available = np.bincount(dataset.y, minlength=k)
    demand = np.sum(counts, axis=0)
    for c in range(k):
        if demand[c] > available[c]:
            raise FeasibilityError(
                f"class {c} is deficient: clients demand {int(demand[c])} samples "
                f"but the dataset has {int(available[c])}"
            )

    rng = RngStream(seed, "partition")
    pools = [rng.child("class", c).permutation(np.where(dataset.y == c)[0])
             for c in range(k)]
    used = [0] * k
    shards = []
    for i, client_counts in enumerate(counts):
        idx = []
        for c in range(k):
            take = int(client_counts[c])
            idx.extend(pools[c][used[c] : used[c] + take])
            used[c] += take
        idx = rng.child("client", i).permutation(np.asarray(idx, dtype=np.int64))
        shards.append(dataset.subset(idx))
    return shards


def dataset_to_csv(dataset: Dataset, path) -> None:
    """Write features and labels with header x0..x{d-1},label."""
    header = [f"x{j}" for j in range(dataset.dim)] + ["label"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row, label in zip(dataset.x, dataset.y):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


def dataset_from_csv(path) -> Dataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if not header or header[-1] != "label":
            raise ValueError("dataset CSV must end with a 'label' column")
        rows = list(reader)
    x = np.array([[float(v) for v in row[:-1]] for row in rows])
    y = np.array([int(row[-1]) for row in rows], dtype=np.int64)
    return Dataset(x, y)


def two_layer_loss_and_grads(model: TwoLayerModel, x: np.ndarray, y: np.ndarray):
    """Mean loss and per-layer mean weight gradients for the ReLU network.

    Forward: h = relu(x @ W1), logits = h @ W2. Backward chain with the
    softmax residual D = softmax(logits) - onehot(y):
        grad_W2 = h^T D / n
        grad_W1 = x^T ((D @ W2^T) * 1[x @ W1 > 0]) / n
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    w1 = effective_weight(model.layers[0])
    w2 = effective_weight(model.layers[1])
    pre = x @ w1
    h = np.maximum(pre, 0.0)
    losses, deltas = softmax_deltas(SoftmaxModel(state=model.layers[1]), h, y)
    n = len(losses)
    grad_w2 = h.T @ deltas / n
    back = (deltas @ w2.T) * (pre > 0)
    grad_w1 = x.T @ back / n
    return float(losses.mean()), [grad_w1, grad_w2]
