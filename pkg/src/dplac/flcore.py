"""Toy-scale federated learning substrate.

Flat-parameter models (softmax regression and a one-hidden-layer tanh MLP),
cross-entropy loss and gradients, local minibatch SGD, synthetic cluster
datasets, Dirichlet non-IID partitioning, and a plain tabular text format
for shipping shards to and from disk.

Models and datasets are immutable value types; every stochastic operation
takes an explicit numpy Generator so independent clients can run
concurrently on deterministically derived streams.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# Logits are clamped to this magnitude before the softmax so cross-entropy
# stays finite at extreme separations.
LOGIT_CLAMP = 30.0


@dataclass(frozen=True)
class Dataset:
    """Dense features with integer class labels in [0, num_classes)."""

    features: np.ndarray  # (n, f) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be (n, f) and labels (n,)")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.features.shape[0] < 1:
            raise ValueError("dataset must contain at least one sample")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels must lie in [0, num_classes)")

    @property
    def num_samples(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(
            features=self.features[indices],
            labels=self.labels[indices],
            num_classes=self.num_classes,
        )


@dataclass(frozen=True)
class Architecture:
    """Shape descriptor for a flat-parameter classifier."""

    kind: str  # "logistic" or "mlp"
    num_features: int
    num_classes: int
    hidden: int = 0

    def __post_init__(self) -> None:
        if self.kind not in ("logistic", "mlp"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.num_features < 1 or self.num_classes < 1:
            raise ValueError("architecture dimensions must be positive")
        if self.kind == "mlp" and self.hidden < 1:
            raise ValueError("mlp architecture requires hidden >= 1")

    def param_count(self) -> int:
        f, k, h = self.num_features, self.num_classes, self.hidden
        if self.kind == "logistic":
            return f * k + k
        return f * h + h + h * k + k


@dataclass(frozen=True)
class Model:
    """An architecture plus its flat parameter vector."""

    arch: Architecture
    params: np.ndarray  # (d,) float64

    def __post_init__(self) -> None:
        if self.params.shape != (self.arch.param_count(),):
            raise ValueError(
                f"params length {self.params.shape} does not match architecture "
                f"({self.arch.param_count()} expected)"
            )

    def with_params(self, params: np.ndarray) -> "Model":
        return replace(self, params=params)


@dataclass(frozen=True)
class LocalConfig:
    """Client-side SGD settings: epochs, batch size, learning rate."""

    epochs: int
    batch_size: int
    lr: float

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr < 0:
            raise ValueError("epochs and batch_size must be >= 1 and lr >= 0")


@dataclass(frozen=True)
class PartitionSpec:
    """Dirichlet split: shard count, concentration, and the draw seed."""

    num_clients: int
    alpha: float
    seed: int

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.alpha <= 0:
            raise ValueError("alpha must be > 0")


def init_model(arch: Architecture, rng: np.random.Generator | None = None) -> Model:
    """Fresh model: zero weights for logistic, scaled Gaussian init for the MLP."""
    if arch.kind == "logistic":
        return Model(arch=arch, params=np.zeros(arch.param_count()))
    if rng is None:
        raise ValueError("mlp initialization requires an rng")
    f, k, h = arch.num_features, arch.num_classes, arch.hidden
    w1 = rng.normal(0.0, 1.0 / np.sqrt(f), size=f * h)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=h * k)
    params = np.concatenate([w1, np.zeros(h), w2, np.zeros(k)])
    return Model(arch=arch, params=params)


def _unpack(arch: Architecture, params: np.ndarray):
    f, k, h = arch.num_features, arch.num_classes, arch.hidden
    if arch.kind == "logistic":
        w = params[: f * k].reshape(f, k)
        b = params[f * k :]
        return w, b
    o = 0
    w1 = params[o : o + f * h].reshape(f, h)
    o += f * h
    b1 = params[o : o + h]
    o += h
    w2 = params[o : o + h * k].reshape(h, k)
    o += h * k
    b2 = params[o:]
    return w1, b1, w2, b2


def logits(model: Model, features: np.ndarray) -> np.ndarray:
    """Raw (unclamped) class scores, shape (n, k)."""
    if features.shape[1] != model.arch.num_features:
        raise ValueError("feature dimension does not match the architecture")
    if model.arch.kind == "logistic":
        w, b = _unpack(model.arch, model.params)
        return features @ w + b
    w1, b1, w2, b2 = _unpack(model.arch, model.params)
    return np.tanh(features @ w1 + b1) @ w2 + b2


def _clamped_log_softmax(z: np.ndarray) -> np.ndarray:
    zc = np.clip(z, -LOGIT_CLAMP, LOGIT_CLAMP)
    m = zc.max(axis=1, keepdims=True)
    return zc - m - np.log(np.exp(zc - m).sum(axis=1, keepdims=True))


def loss(model: Model, data: Dataset) -> float:
    """Mean cross-entropy of the model on the dataset."""
    if data.num_classes != model.arch.num_classes:
        raise ValueError("dataset classes do not match the architecture")
    log_p = _clamped_log_softmax(logits(model, data.features))
    n = data.num_samples
    return float(-log_p[np.arange(n), data.labels].mean())


def loss_gradient(model: Model, features: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Flat gradient of the mean cross-entropy over the given batch."""
    arch = model.arch
    n = features.shape[0]
    z_raw = logits(model, features)
    log_p = _clamped_log_softmax(z_raw)
    p = np.exp(log_p)
    d = p.copy()
    d[np.arange(n), labels] -= 1.0
    d /= n
    # Clamped logits contribute zero derivative outside the clamp window.
    d *= np.abs(z_raw) < LOGIT_CLAMP
    if arch.kind == "logistic":
        gw = features.T @ d
        gb = d.sum(axis=0)
        return np.concatenate([gw.ravel(), gb])
    w1, b1, w2, b2 = _unpack(arch, model.params)
    hidden = np.tanh(features @ w1 + b1)
    gw2 = hidden.T @ d
    gb2 = d.sum(axis=0)
    dh = (d @ w2.T) * (1.0 - hidden * hidden)
    gw1 = features.T @ dh
    gb1 = dh.sum(axis=0)
    return np.concatenate([gw1.ravel(), gb1, gw2.ravel(), gb2])


def user_update(
    model: Model, data: Dataset, cfg: LocalConfig, rng: np.random.Generator
) -> np.ndarray:
    """Pseudo-gradient of one client: local SGD result minus the input weights.

    Runs cfg.epochs epochs of minibatch SGD with a fresh shuffle per epoch;
    the final short batch of each epoch is used, not dropped. The input model
    is left untouched.
    """
    if data.num_samples == 0:
        raise ValueError("cannot train on an empty dataset")
    w = model.params.copy()
    n = data.num_samples
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            g = loss_gradient(model.with_params(w), data.features[idx], data.labels[idx])
            w = w - cfg.lr * g
    return w - model.params


def accuracy(model: Model, data: Dataset) -> float:
    """Fraction of argmax-correct predictions; logit ties favor the smaller class."""
    z = logits(model, data.features)
    return float((np.argmax(z, axis=1) == data.labels).mean())


def _largest_remainder_counts(proportions: np.ndarray, total: int) -> np.ndarray:
    raw = proportions * total
    base = np.floor(raw).astype(int)
    short = total - int(base.sum())
    if short > 0:
        # Stable sort: remainder ties resolve toward the smaller index.
        order = np.argsort(-(raw - base), kind="stable")
        base[order[:short]] += 1
    return base


def dirichlet_partition(data: Dataset, spec: PartitionSpec) -> list[Dataset]:
    """Split a dataset into per-client shards with Dirichlet class skew.

    For each class, client proportions are drawn from Dirichlet(alpha * 1_N)
    and that class's samples are dealt out by largest-remainder rounding.
    A repair pass then moves single samples from the largest shard into any
    empty shard, so every client ends up nonempty. The shards are disjoint
    and cover the input exactly.
    """
    n = data.num_samples
    if n < spec.num_clients:
        raise ValueError(
            f"cannot split {n} samples across {spec.num_clients} clients"
        )
    rng = np.random.default_rng(spec.seed)
    shards: list[list[int]] = [[] for _ in range(spec.num_clients)]
    for cls in range(data.num_classes):
        idx = np.flatnonzero(data.labels == cls)
        if idx.size == 0:
            continue
        proportions = rng.dirichlet(np.full(spec.num_clients, spec.alpha))
        idx = rng.permutation(idx)
        counts = _largest_remainder_counts(proportions, idx.size)
        start = 0
        for client, count in enumerate(counts):
            shards[client].extend(idx[start : start + count].tolist())
            start += count
    sizes = [len(s) for s in shards]
    for client in range(spec.num_clients):
        if sizes[client] == 0:
            donor = int(np.argmax(sizes))
            shards[client].append(shards[donor].pop())
            sizes[client] += 1
            sizes[donor] -= 1
    return [data.subset(np.array(sorted(s), dtype=int)) for s in shards]


def synth_dataset(
    num_samples: int,
    num_features: int,
    num_classes: int,
    separation: float,
    seed: int,
    noise_scales: tuple[float, float] = (0.6, 2.4),
) -> Dataset:
    """Gaussian class-conditional clusters with the given mean separation.

    Cluster means sit on distinct feature axes (spread across the feature
    range) at pairwise Euclidean distance `separation`. Per-feature noise
    scales ramp geometrically between `noise_scales`, so features are
    deliberately heteroscedastic: the naive between-means direction is
    informative but clearly suboptimal, which is what gives clipped, noisy
    training something to trade off.
    """
    if num_samples < 1 or num_features < 1 or num_classes < 1:
        raise ValueError("num_samples, num_features, num_classes must be positive")
    if separation < 0:
        raise ValueError("separation must be >= 0")
    rng = np.random.default_rng(seed)
    scales = np.geomspace(noise_scales[0], noise_scales[1], num_features)
    means = np.zeros((num_classes, num_features))
    if num_classes > 1:
        magnitude = separation / np.sqrt(2.0)
        if num_classes <= num_features:
            for cls in range(num_classes):
                axis = cls * (num_features - 1) // (num_classes - 1)
                means[cls, axis] = magnitude
        else:
            # More classes than features: fall back to random unit directions.
            directions = rng.standard_normal((num_classes, num_features))
            directions /= np.linalg.norm(directions, axis=1, keepdims=True)
            means = magnitude * directions
    labels = rng.integers(0, num_classes, size=num_samples)
    noise = rng.standard_normal((num_samples, num_features)) * scales
    features = means[labels] + noise
    return Dataset(features=features, labels=labels.astype(np.int64), num_classes=num_classes)


def save_dataset(data: Dataset, path) -> None:
    """Write the plain tabular text format: feature columns then the label."""
    names = [f"x{j}" for j in range(data.num_features)] + ["label"]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(",".join(names) + "\n")
        for row, label in zip(data.features, data.labels):
            cells = ["%.17g" % v for v in row]
            cells.append(str(int(label)))
            fh.write(",".join(cells) + "\n")


def load_dataset(path, num_classes: int | None = None) -> Dataset:
    """Read the tabular text format back; class count is inferred unless given."""
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: missing header row")
        columns = header.split(",")
        if columns[-1] != "label":
            raise ValueError(f"{path}: last column must be 'label', got {columns[-1]!r}")
        width = len(columns) - 1
        features = []
        labels = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != width + 1:
                raise ValueError(f"{path}:{lineno}: expected {width + 1} columns")
            features.append([float(c) for c in cells[:width]])
            labels.append(int(cells[-1]))
    feats = np.array(features, dtype=float)
    labs = np.array(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labs.max()) + 1 if labs.size else 1
    return Dataset(features=feats, labels=labs, num_classes=num_classes)
