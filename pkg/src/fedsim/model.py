"""Multinomial logistic regression (MCLR): local SGD, evaluation, FedAvg."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from fedsim.errors import ContractError, ParseError


@dataclass(eq=False)
class ModelParams:
    weights: np.ndarray  # (C, F)
    bias: np.ndarray  # (C,)

    @classmethod
    def zeros(cls, num_classes: int, feature_dim: int) -> "ModelParams":
        return cls(np.zeros((num_classes, feature_dim)), np.zeros(num_classes))

    @property
    def shape(self) -> tuple[int, int]:
        return self.weights.shape

    @property
    def num_params(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "ModelParams":
        return ModelParams(self.weights.copy(), self.bias.copy())

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.bias).all())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return np.array_equal(self.weights, other.weights) and np.array_equal(self.bias, other.bias)


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.03
    batch_size: int = 10
    local_epochs: int = 10

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ContractError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.local_epochs < 1:
            raise ContractError("batch_size and local_epochs must be >= 1")


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return x @ params.weights.T + params.bias


def loss_and_grad(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, ModelParams]:
    """Mean cross-entropy on ``(x, y)`` and its gradient w.r.t. the params."""
    logp = _log_softmax(logits(params, x))
    n = y.shape[0]
    loss = -logp[np.arange(n), y].mean()
    delta = np.exp(logp)
    delta[np.arange(n), y] -= 1.0
    delta /= n
    return float(loss), ModelParams(delta.T @ x, delta.sum(axis=0))


@numba.njit(cache=True)
def _sgd_epochs(w, b, x, y, orders, lr, batch_size):
    n_classes, n_feat = w.shape
    z = np.empty(n_classes)
    gw = np.empty_like(w)
    gb = np.empty_like(b)
    for e in range(orders.shape[0]):
        order = orders[e]
        n = order.shape[0]
        for start in range(0, n, batch_size):
            stop = min(start + batch_size, n)
            gw[:, :] = 0.0
            gb[:] = 0.0
            for r in range(start, stop):
                i = order[r]
                zmax = -np.inf
                for c in range(n_classes):
                    acc = b[c]
                    for f in range(n_feat):
                        acc += w[c, f] * x[i, f]
                    z[c] = acc
                    if acc > zmax:
                        zmax = acc
                total = 0.0
                for c in range(n_classes):
                    z[c] = np.exp(z[c] - zmax)
                    total += z[c]
                for c in range(n_classes):
                    d = z[c] / total
                    if c == y[i]:
                        d -= 1.0
                    gb[c] += d
                    for f in range(n_feat):
                        gw[c, f] += d * x[i, f]
            scale = lr / (stop - start)
            for c in range(n_classes):
                b[c] -= scale * gb[c]
                for f in range(n_feat):
                    w[c, f] -= scale * gw[c, f]


def client_update(
    start: ModelParams, x: np.ndarray, y: np.ndarray, cfg: TrainingConfig, rng_seed
) -> ModelParams:
    """Run ``cfg.local_epochs`` epochs of minibatch SGD from ``start``.

    Each epoch visits the shard in a fresh seeded permutation; the last
    batch of an epoch may be short. ``rng_seed`` is anything accepted by
    ``numpy.random.default_rng``.
    """
    n = y.shape[0]
    if n == 0:
        raise ContractError("client_update needs a nonempty train shard")
    rng = np.random.default_rng(rng_seed)
    orders = np.stack([rng.permutation(n) for _ in range(cfg.local_epochs)])
    out = start.copy()
    if cfg.learning_rate == 0:
        return out
    _sgd_epochs(
        out.weights,
        out.bias,
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(y, dtype=np.int64),
        orders,
        float(cfg.learning_rate),
        int(cfg.batch_size),
    )
    return out


def evaluate(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Return ``(accuracy, mean cross-entropy)``; argmax ties go to the lowest class."""
    if y.shape[0] == 0:
        raise ContractError("evaluate needs at least one sample")
    logp = _log_softmax(logits(params, x))
    acc = float(np.mean(np.argmax(logp, axis=1) == y))
    return acc, float(-logp[np.arange(y.shape[0]), y].mean())


def count_correct(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[int, float]:
    """Number of correct predictions and summed cross-entropy (0, 0.0 when empty)."""
    if y.shape[0] == 0:
        return 0, 0.0
    logp = _log_softmax(logits(params, x))
    correct = int(np.sum(np.argmax(logp, axis=1) == y))
    return correct, float(-logp[np.arange(y.shape[0]), y].sum())


def flatten_params(p: ModelParams) -> np.ndarray:
    return np.concatenate([p.weights.ravel(), p.bias])


def flatten_delta(after: ModelParams, before: ModelParams) -> np.ndarray:
    """Row-major weight difference followed by the bias difference."""
    if after.weights.shape != before.weights.shape or after.bias.shape != before.bias.shape:
        raise ContractError(f"shape mismatch: {after.weights.shape} vs {before.weights.shape}")
    return flatten_params(after) - flatten_params(before)


def fedavg_aggregate(contributions: Sequence[tuple[ModelParams, int]]) -> ModelParams:
    """Weighted mean of full parameter sets, weights ``n_i / sum(n)``."""
    if not contributions:
        raise ContractError("fedavg_aggregate needs at least one contribution")
    sizes = np.array([n for _, n in contributions], dtype=float)
    if (sizes <= 0).any():
        raise ContractError("contribution weights must be positive")
    shape = contributions[0][0].weights.shape
    if any(p.weights.shape != shape or p.bias.shape != (shape[0],) for p, _ in contributions):
        raise ContractError("contributions have mismatched shapes")
    frac = sizes / sizes.sum()
    w = np.tensordot(frac, np.stack([p.weights for p, _ in contributions]), axes=1)
    b = frac @ np.stack([p.bias for p, _ in contributions])
    return ModelParams(w, b)


def format_params(p: ModelParams) -> str:
    """Text block: ``params,C,F`` then C weight rows, then one bias row."""
    rows = [f"params,{p.weights.shape[0]},{p.weights.shape[1]}"]
    rows += [",".join(map(repr, r)) for r in p.weights.tolist()]
    rows.append(",".join(map(repr, p.bias.tolist())))
    return "\n".join(rows) + "\n"


def parse_params(text: str) -> ModelParams:
    lines = text.strip("\n").split("\n")
    head = lines[0].split(",")
    if len(head) != 3 or head[0] != "params":
        raise ParseError("line 1: expected 'params,C,F'")
    c, f = int(head[1]), int(head[2])
    if len(lines) != c + 2:
        raise ParseError(f"expected {c + 2} lines, got {len(lines)}")
    try:
        w = np.array([[float(v) for v in ln.split(",")] for ln in lines[1 : c + 1]])
        b = np.array([float(v) for v in lines[c + 1].split(",")])
    except ValueError as exc:
        raise ParseError(f"non-numeric parameter value: {exc}") from None
    if w.shape != (c, f) or b.shape != (c,):
        raise ParseError(f"parameter block does not match header shape ({c}, {f})")
    return ModelParams(w, b)
