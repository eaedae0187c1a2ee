"""Federated datasets: synthetic generation, power-law partitioning, text I/O.

A dataset is a list of per-client shards, each holding a train and a test
split as numpy arrays (features ``float64`` of shape ``(n, F)``, labels
``int64`` of shape ``(n,)``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsim.errors import ConfigError, ParseError

HEADER_TAG = "fedsim-dataset"


@dataclass(eq=False)
class ClientShard:
    client_id: int
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_train(self) -> int:
        return int(self.y_train.shape[0])

    @property
    def n_test(self) -> int:
        return int(self.y_test.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClientShard):
            return NotImplemented
        return (
            self.client_id == other.client_id
            and np.array_equal(self.x_train, other.x_train)
            and np.array_equal(self.y_train, other.y_train)
            and np.array_equal(self.x_test, other.x_test)
            and np.array_equal(self.y_test, other.y_test)
        )


@dataclass(eq=False)
class FederatedDataset:
    num_classes: int
    feature_dim: int
    shards: list[ClientShard] = field(default_factory=list)
    # Samples discarded by a partitioner; not persisted.
    dropped: int = 0

    @property
    def num_clients(self) -> int:
        return len(self.shards)

    def train_sizes(self) -> np.ndarray:
        return np.array([s.n_train for s in self.shards], dtype=np.int64)

    def total_samples(self) -> int:
        return sum(s.n_train + s.n_test for s in self.shards)

    def validate(self) -> None:
        """Raise ``ConfigError`` if any dataset invariant is broken."""
        if self.num_classes < 1 or self.feature_dim < 1:
            raise ConfigError("num_classes and feature_dim must be positive")
        if not self.shards:
            raise ConfigError("dataset has no shards")
        for i, s in enumerate(self.shards):
            if s.client_id != i:
                raise ConfigError(f"client ids must be contiguous from 0; shard {i} has id {s.client_id}")
            if s.n_train == 0:
                raise ConfigError(f"client {i} has an empty train split")
            for x, y in ((s.x_train, s.y_train), (s.x_test, s.y_test)):
                if x.ndim != 2 or x.shape[1] != self.feature_dim or x.shape[0] != y.shape[0]:
                    raise ConfigError(f"client {i}: feature array shape {x.shape} inconsistent")
                if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                    raise ConfigError(f"client {i}: label outside [0, {self.num_classes})")

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FederatedDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.feature_dim == other.feature_dim
            and self.shards == other.shards
        )


def power_law_counts(num_clients: int, total: int, min_count: int = 10, exponent: float = 1.1) -> np.ndarray:
    """Per-client sample counts ``min + round(extra * (k+1)^-exponent / Z)``.

    ``Z`` normalizes the power-law weights so that the counts sum to roughly
    ``total`` (exactly up to rounding). Counts are returned in descending
    order of client rank.
    """
    if num_clients < 1:
        raise ConfigError("num_clients must be >= 1")
    if min_count < 1:
        raise ConfigError("power-law min must be >= 1")
    extra = total - num_clients * min_count
    if extra < 0:
        raise ConfigError(f"total={total} cannot give {num_clients} clients at least {min_count} samples each")
    weights = np.arange(1, num_clients + 1, dtype=float) ** (-exponent)
    return min_count + np.rint(extra * weights / weights.sum()).astype(np.int64)


def _split_train_test(x, y, test_fraction, rng):
    n = y.shape[0]
    n_test = int(round(test_fraction * n))
    n_test = min(n_test, n - 1)
    order = rng.permutation(n)
    test_idx, train_idx = order[:n_test], order[n_test:]
    return x[train_idx], y[train_idx], x[test_idx], y[test_idx]


def _check_fraction(test_fraction: float) -> None:
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in [0, 1), got {test_fraction}")


def synthetic_client_models(
    alpha: float, beta: float, num_clients: int, feature_dim: int, num_classes: int, rng: np.random.Generator
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per-client ``(W, b, feature_mean)`` for the Synthetic(alpha, beta) recipe."""
    shared_w = rng.normal(0.0, 1.0, (num_classes, feature_dim))
    shared_b = rng.normal(0.0, 1.0, num_classes)
    shared_v = rng.normal(0.0, 1.0, feature_dim)
    out = []
    for _ in range(num_clients):
        u_k = rng.normal(0.0, alpha)
        b_k = rng.normal(0.0, beta)
        if alpha > 0:
            w = rng.normal(u_k, 1.0, (num_classes, feature_dim))
            bias = rng.normal(u_k, 1.0, num_classes)
        else:
            w, bias = shared_w, shared_b
        v = rng.normal(b_k, 1.0, feature_dim) if beta > 0 else shared_v
        out.append((w, bias, v))
    return out


def generate_synthetic(
    alpha: float,
    beta: float,
    num_clients: int = 100,
    feature_dim: int = 60,
    num_classes: int = 10,
    samples_power_law: tuple[int, float] = (10, 1.1),
    test_fraction: float = 0.2,
    seed: int = 0,
    total_samples: int = 75349,
) -> FederatedDataset:
    """Synthetic(alpha, beta) federated classification data.

    Client ``k`` gets its own softmax labelling model and feature mean:

    * ``u_k ~ N(0, alpha)``, ``W_k, b_k ~ N(u_k, 1)``  (model heterogeneity)
    * ``B_k ~ N(0, beta)``, ``v_k ~ N(B_k, 1)``          (feature heterogeneity)
    * ``x ~ N(v_k, diag(j^-1.2))``, ``y = argmax(W_k x + b_k)``

    The second argument of each normal is a standard deviation. With
    ``alpha == 0`` every client shares one drawn ``(W, b)``; with
    ``beta == 0`` every client shares one drawn ``v``.
    """
    if alpha < 0 or beta < 0:
        raise ConfigError("alpha and beta must be non-negative")
    if feature_dim < 1 or num_classes < 2:
        raise ConfigError("feature_dim must be >= 1 and num_classes >= 2")
    _check_fraction(test_fraction)
    min_count, exponent = samples_power_law
    counts = power_law_counts(num_clients, total_samples, min_count, exponent)

    rng = np.random.default_rng(seed)
    counts = counts[rng.permutation(num_clients)]
    models = synthetic_client_models(alpha, beta, num_clients, feature_dim, num_classes, rng)
    std = np.arange(1, feature_dim + 1, dtype=float) ** -0.6

    shards = []
    for k, (w, bias, v) in enumerate(models):
        x = v + rng.normal(size=(int(counts[k]), feature_dim)) * std
        y = np.argmax(x @ w.T + bias, axis=1).astype(np.int64)
        shards.append(ClientShard(k, *_split_train_test(x, y, test_fraction, rng)))
    return FederatedDataset(num_classes, feature_dim, shards)


def partition_by_power_law(
    x: np.ndarray,
    y: np.ndarray,
    num_clients: int,
    classes_per_client: int,
    test_fraction: float = 0.2,
    seed: int = 0,
    min_count: int = 10,
    exponent: float = 1.1,
    num_classes: int | None = None,
) -> FederatedDataset:
    """Split a labelled pool into label-skewed, size-skewed client shards.

    Client ``k`` draws from the ``classes_per_client`` labels starting at
    position ``k`` in the sorted list of distinct labels (wrapping). Its
    power-law quota is spread over those labels in proportion to their
    supply; when a label is oversubscribed every request is scaled down.
    Samples no client asked for are dropped and counted in ``dropped``.
    """
    y = np.asarray(y, dtype=np.int64)
    x = np.asarray(x, dtype=float)
    if y.size == 0:
        raise ConfigError("pool is empty")
    if x.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigError("features and labels disagree in length")
    _check_fraction(test_fraction)
    labels = np.unique(y)
    if not 1 <= classes_per_client <= labels.size:
        raise ConfigError(
            f"classes_per_client={classes_per_client} but the pool has {labels.size} distinct labels"
        )
    if num_classes is None:
        num_classes = int(labels.max()) + 1

    rng = np.random.default_rng(seed)
    quotas = power_law_counts(num_clients, y.size, min(min_count, y.size // num_clients or 1), exponent)
    quotas = quotas[rng.permutation(num_clients)]

    pools = {int(lab): rng.permutation(np.flatnonzero(y == lab)) for lab in labels}
    supply = {lab: idx.size for lab, idx in pools.items()}
    client_labels = [
        [int(labels[(k + j) % labels.size]) for j in range(classes_per_client)] for k in range(num_clients)
    ]

    demand = np.zeros((num_clients, labels.size))
    col = {int(lab): i for i, lab in enumerate(labels)}
    for k, labs in enumerate(client_labels):
        avail = np.array([supply[lab] for lab in labs], dtype=float)
        demand[k, [col[lab] for lab in labs]] = quotas[k] * avail / avail.sum()
    granted = np.floor(demand).astype(np.int64)
    for lab, c in col.items():
        asked = demand[:, c].sum()
        if asked > supply[lab]:
            granted[:, c] = np.floor(demand[:, c] * supply[lab] / asked).astype(np.int64)

    shards = []
    cursor = {lab: 0 for lab in pools}
    for k in range(num_clients):
        picked = []
        for lab in client_labels[k]:
            n = int(granted[k, col[lab]])
            picked.append(pools[lab][cursor[lab] : cursor[lab] + n])
            cursor[lab] += n
        idx = np.concatenate(picked)
        if idx.size == 0:
            raise ConfigError(f"pool too small: client {k} received no samples")
        idx = rng.permutation(idx)
        shards.append(ClientShard(k, *_split_train_test(x[idx], y[idx], test_fraction, rng)))
    assigned = sum(s.n_train + s.n_test for s in shards)
    return FederatedDataset(num_classes, x.shape[1], shards, dropped=int(y.size - assigned))


def save_dataset(ds: FederatedDataset, path: str | Path) -> None:
    """Write ``ds`` as line-delimited UTF-8 text.

    Layout::

        fedsim-dataset,<C>,<F>,<num_clients>
        client,<id>,<n_train>,<n_test>
        <id>,train|test,<label>,<f_1>,...,<f_F>

    Floats are written with ``repr`` so loading is bit-exact.
    """
    ds.validate()
    lines = [f"{HEADER_TAG},{ds.num_classes},{ds.feature_dim},{ds.num_clients}"]
    for s in ds.shards:
        lines.append(f"client,{s.client_id},{s.n_train},{s.n_test}")
        for split, xs, ys in (("train", s.x_train, s.y_train), ("test", s.x_test, s.y_test)):
            for row, label in zip(xs.tolist(), ys.tolist()):
                lines.append(f"{s.client_id},{split},{label}," + ",".join(map(repr, row)))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_dataset(path: str | Path) -> FederatedDataset:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{path}: empty file")

    def fail(lineno: int, msg: str):
        raise ParseError(f"{path}:{lineno}: {msg}")

    head = lines[0].split(",")
    if len(head) != 4 or head[0] != HEADER_TAG:
        fail(1, f"expected header '{HEADER_TAG},C,F,num_clients'")
    try:
        num_classes, feature_dim, num_clients = (int(v) for v in head[1:])
    except ValueError:
        fail(1, "non-integer value in dataset header")

    shards: list[ClientShard] = []
    i = 1
    for expected_id in range(num_clients):
        if i >= len(lines):
            fail(i + 1, f"missing client header for client {expected_id}")
        rec = lines[i].split(",")
        if len(rec) != 4 or rec[0] != "client":
            fail(i + 1, "expected client header 'client,id,n_train,n_test'")
        try:
            cid, n_train, n_test = (int(v) for v in rec[1:])
        except ValueError:
            fail(i + 1, "non-integer value in client header")
        if cid != expected_id:
            fail(i + 1, f"client id {cid} out of order (expected {expected_id})")
        i += 1
        arrays = {}
        for split, n in (("train", n_train), ("test", n_test)):
            xs = np.empty((n, feature_dim))
            ys = np.empty(n, dtype=np.int64)
            for r in range(n):
                if i >= len(lines):
                    fail(i + 1, f"client {cid}: truncated {split} split")
                rec = lines[i].split(",")
                if len(rec) != feature_dim + 3:
                    fail(i + 1, f"expected {feature_dim + 3} fields, got {len(rec)}")
                if rec[0] != str(cid) or rec[1] != split:
                    fail(i + 1, f"expected a '{cid},{split}' sample record")
                try:
                    label = int(rec[2])
                    xs[r] = [float(v) for v in rec[3:]]
                except ValueError:
                    fail(i + 1, "non-numeric label or feature")
                if not 0 <= label < num_classes:
                    fail(i + 1, f"label {label} outside [0, {num_classes})")
                ys[r] = label
                i += 1
            arrays[split] = (xs, ys)
        if n_train == 0:
            fail(i, f"client {cid} has an empty train split")
        shards.append(ClientShard(cid, *arrays["train"], *arrays["test"]))
    if i != len(lines):
        fail(i + 1, "trailing records after the last client")
    return FederatedDataset(num_classes, feature_dim, shards)
