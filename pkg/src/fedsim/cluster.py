"""Client grouping: pre-training deltas, similarity rows, Gaussian affinity, spectral clustering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from fedsim.data import FederatedDataset
from fedsim.eigen import jacobi_eigh
from fedsim.errors import ConfigError, ContractError, DegenerateInputError, ParseError
from fedsim.latency import ClientProfile, RadioSystem, normalize_latencies, total_update_latency
from fedsim.model import ModelParams, TrainingConfig, client_update, flatten_delta

logger = logging.getLogger(__name__)

PRETRAIN_STREAM = 7001


@dataclass(frozen=True)
class ClusterConfig:
    beta: float = 1.0
    sigma: float = 1.0
    n_groups: int = 4
    pretrain: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    normalization: str = "variance"  # or "stddev"
    affinity_exponent: str = "norm"  # or "norm_squared"

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.n_groups < 1:
            raise ConfigError("n_groups must be >= 1")
        if self.affinity_exponent not in ("norm", "norm_squared"):
            raise ConfigError(f"affinity_exponent must be 'norm' or 'norm_squared', got {self.affinity_exponent!r}")
        if self.normalization not in ("variance", "stddev"):
            raise ConfigError(f"normalization must be 'variance' or 'stddev', got {self.normalization!r}")


@dataclass
class SimilarityMatrix:
    rows: np.ndarray  # (v, v + 1): latency column, then cosines
    client_ids: list[int]


@dataclass
class GroupAssignment:
    group_of: dict[int, int]
    n_groups: int

    def members(self) -> list[list[int]]:
        groups: list[list[int]] = [[] for _ in range(self.n_groups)]
        for cid in sorted(self.group_of):
            groups[self.group_of[cid]].append(cid)
        return groups

    def validate(self, num_clients: int | None = None) -> None:
        if num_clients is not None and sorted(self.group_of) != list(range(num_clients)):
            raise ConfigError(f"assignment does not cover clients 0..{num_clients - 1}")
        if any(not 0 <= g < self.n_groups for g in self.group_of.values()):
            raise ConfigError("group id outside [0, n_groups)")
        if any(not m for m in self.members()):
            raise ConfigError("assignment has an empty group")

    @classmethod
    def single(cls, client_ids: Sequence[int]) -> "GroupAssignment":
        return cls({int(c): 0 for c in client_ids}, 1)


def pretrain_deltas(ds: FederatedDataset, w0: ModelParams, cfg: ClusterConfig) -> dict[int, np.ndarray]:
    """Train every client from ``w0`` and return the flattened parameter change.

    Every client uses the same shuffle seed, so equal shards give equal deltas.
    """
    out = {}
    for shard in ds.shards:
        trained = client_update(w0, shard.x_train, shard.y_train, cfg.pretrain, [cfg.seed, PRETRAIN_STREAM])
        out[shard.client_id] = flatten_delta(trained, w0)
    return out


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between ``u`` and ``v``.

    A zero vector has cosine 0 with any nonzero vector, and two zero
    vectors have cosine 1.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ContractError(f"length mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 and nv == 0:
        return 1.0
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosines of the rows of ``vectors``, exactly symmetric."""
    norms = np.linalg.norm(vectors, axis=1)
    nonzero = norms > 0
    unit = np.zeros_like(vectors, dtype=float)
    unit[nonzero] = vectors[nonzero] / norms[nonzero, None]
    cos = unit @ unit.T
    cos = np.clip(0.5 * (cos + cos.T), -1.0, 1.0)
    zero = ~nonzero
    cos[np.ix_(zero, zero)] = 1.0
    np.fill_diagonal(cos, 1.0)
    return cos


def build_similarity_matrix(
    deltas: Mapping[int, np.ndarray],
    latencies_ms: Mapping[int, float] | Sequence[float],
    beta: float = 1.0,
    normalization: str = "variance",
) -> SimilarityMatrix:
    """Rows ``[beta * t_norm_i, cos(i, 0), ..., cos(i, v-1)]`` in ascending client order."""
    ids = sorted(deltas)
    if isinstance(latencies_ms, Mapping):
        if sorted(latencies_ms) != ids:
            raise ContractError("deltas and latencies cover different clients")
        lat = [latencies_ms[c] for c in ids]
    else:
        if len(latencies_ms) != len(ids):
            raise ContractError("deltas and latencies cover different clients")
        lat = list(latencies_ms)
    try:
        t_norm = normalize_latencies(lat, normalization)
    except (DegenerateInputError, ContractError) as exc:
        logger.warning("latency column set to zero: %s", exc)
        t_norm = np.zeros(len(ids))
    cos = cosine_matrix(np.stack([deltas[c] for c in ids]))
    return SimilarityMatrix(np.column_stack([beta * t_norm, cos]), ids)


def gaussian_affinity(m: SimilarityMatrix | np.ndarray, sigma: float = 1.0, exponent: str = "norm") -> np.ndarray:
    """``exp(-||L_i - L_j|| / (2 sigma^2))`` over similarity rows.

    ``exponent="norm_squared"`` uses the squared distance (the usual RBF kernel).
    """
    if not sigma > 0:
        raise ContractError("sigma must be positive")
    rows = m.rows if isinstance(m, SimilarityMatrix) else np.asarray(m, dtype=float)
    sq = np.sum((rows[:, None, :] - rows[None, :, :]) ** 2, axis=2)
    if exponent == "norm":
        dist = np.sqrt(sq)
    elif exponent == "norm_squared":
        dist = sq
    else:
        raise ConfigError(f"unknown affinity exponent {exponent!r}")
    return np.exp(-dist / (2.0 * sigma**2))


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2`` with ``D`` the row sums of ``a``."""
    deg = a.sum(axis=1)
    if (deg <= 0).any():
        raise DegenerateInputError("affinity has a row with non-positive degree")
    inv = 1.0 / np.sqrt(deg)
    lap = np.eye(a.shape[0]) - inv[:, None] * a * inv[None, :]
    return 0.5 * (lap + lap.T)


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(((points[:, None, :] - np.array(centers)[None]) ** 2).sum(axis=2), axis=1)
        total = d2.sum()
        idx = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
        centers.append(points[idx])
    return np.array(centers)


def _assign(points, centers):
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2


def kmeans(
    points: np.ndarray, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 100
) -> tuple[np.ndarray, float]:
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Each run stops when the assignment no longer changes or after
    ``max_iter`` iterations. An empty cluster is re-seeded at the point
    lying farthest from its own centroid.
    """
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ConfigError(f"k={k} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    best_labels, best_inertia = None, np.inf
    for _ in range(n_init):
        centers = _kmeans_pp(points, k, rng)
        labels, d2 = _assign(points, centers)
        for _ in range(max_iter):
            for c in range(k):
                if not np.any(labels == c):
                    own = d2[np.arange(n), labels]
                    far = int(np.argmax(own))
                    centers[c] = points[far]
                    labels[far] = c
            centers = np.array([points[labels == c].mean(axis=0) for c in range(k)])
            new_labels, d2 = _assign(points, centers)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        if len(np.unique(labels)) < k:
            continue
        inertia = float(d2[np.arange(n), labels].sum())
        if inertia < best_inertia - 1e-12:
            best_labels, best_inertia = labels.copy(), inertia
    if best_labels is None:
        raise DegenerateInputError(f"could not form {k} nonempty clusters")
    return best_labels, best_inertia


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Rename cluster ids in order of first appearance."""
    mapping: dict[int, int] = {}
    for lab in labels.tolist():
        mapping.setdefault(lab, len(mapping))
    return np.array([mapping[lab] for lab in labels.tolist()])


def spectral_embedding(a: np.ndarray, n_groups: int) -> np.ndarray:
    """Unit-normalized rows of the eigenvectors for the ``n_groups`` smallest Laplacian eigenvalues."""
    _, vecs = jacobi_eigh(normalized_laplacian(a))
    u = vecs[:, :n_groups]
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    return np.divide(u, norms, out=np.zeros_like(u), where=norms > 0)


def spectral_cluster(
    a: np.ndarray, n_groups: int, seed: int = 0, client_ids: Sequence[int] | None = None
) -> GroupAssignment:
    a = np.asarray(a, dtype=float)
    v = a.shape[0]
    if not 1 <= n_groups <= v:
        raise ConfigError(f"n_groups={n_groups} must be in [1, {v}]")
    ids = list(range(v)) if client_ids is None else [int(c) for c in client_ids]
    if n_groups == 1:
        return GroupAssignment({c: 0 for c in ids}, 1)
    labels, _ = kmeans(spectral_embedding(a, n_groups), n_groups, seed=seed)
    labels = _canonical_labels(labels)
    return GroupAssignment({c: int(g) for c, g in zip(ids, labels)}, n_groups)


@dataclass
class ClusterResult:
    assignment: GroupAssignment
    latencies_ms: dict[int, float]
    similarity: SimilarityMatrix
    affinity: np.ndarray


def group_clients(
    ds: FederatedDataset,
    profiles: Sequence[ClientProfile],
    sys: RadioSystem,
    cfg: ClusterConfig,
    w0: ModelParams | None = None,
) -> ClusterResult:
    """Full grouping pipeline: pre-train, similarity rows, affinity, spectral clustering."""
    if len(profiles) != ds.num_clients:
        raise ConfigError(f"{len(profiles)} profiles for {ds.num_clients} clients")
    if w0 is None:
        w0 = ModelParams.zeros(ds.num_classes, ds.feature_dim)
    lat = {p.client_id: total_update_latency(p, sys, "expected") for p in profiles}
    deltas = pretrain_deltas(ds, w0, cfg)
    sim = build_similarity_matrix(deltas, lat, cfg.beta, cfg.normalization)
    aff = gaussian_affinity(sim, cfg.sigma, cfg.affinity_exponent)
    assignment = spectral_cluster(aff, cfg.n_groups, cfg.seed, sim.client_ids)
    return ClusterResult(assignment, lat, sim, aff)


def save_assignment(assignment: GroupAssignment, path: str | Path) -> None:
    lines = ["client_id,group_id"] + [f"{c},{assignment.group_of[c]}" for c in sorted(assignment.group_of)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_assignment(path: str | Path) -> GroupAssignment:
    lines = Path(path).read_text(encoding="utf-8").strip("\n").split("\n")
    if not lines or lines[0].strip() != "client_id,group_id":
        raise ParseError(f"{path}:1: expected header 'client_id,group_id'")
    group_of = {}
    for lineno, ln in enumerate(lines[1:], start=2):
        parts = ln.split(",")
        try:
            cid, gid = int(parts[0]), int(parts[1])
            if len(parts) != 2:
                raise ValueError
        except (ValueError, IndexError):
            raise ParseError(f"{path}:{lineno}: expected 'client_id,group_id'") from None
        if cid in group_of:
            raise ParseError(f"{path}:{lineno}: duplicate client {cid}")
        group_of[cid] = gid
    if not group_of:
        raise ParseError(f"{path}: no assignments")
    n = max(group_of.values()) + 1
    assignment = GroupAssignment(group_of, n)
    try:
        assignment.validate()
    except ConfigError as exc:
        raise ParseError(f"{path}: {exc}") from None
    return assignment


def save_matrix(m: np.ndarray, path: str | Path) -> None:
    rows = [",".join(repr(float(v)) for v in r) for r in np.atleast_2d(m)]
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
