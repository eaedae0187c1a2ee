"""Client update latency: shifted-exponential compute time plus FDMA uplink time.

All latencies are in milliseconds. ``x`` is ms per sample and ``mu`` is
samples per ms, so ``d / mu`` is in ms.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedsim.errors import ConfigError, ContractError, DegenerateInputError, ParseError

SNR_DB_RANGE = (-50.0, 150.0)


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    data_size: int
    x: float
    mu: float
    power_dbm: float = 23.0
    gamma: float = 0.1
    distance_km: float = 0.5

    def __post_init__(self):
        if self.data_size < 1:
            raise ContractError(f"client {self.client_id}: data_size must be >= 1")
        if not (self.x > 0 and self.mu > 0):
            raise ContractError(f"client {self.client_id}: x and mu must be positive")
        if not 0 < self.gamma <= 1:
            raise ContractError(f"client {self.client_id}: gamma must be in (0, 1]")
        if not self.distance_km > 0:
            raise ContractError(f"client {self.client_id}: distance_km must be positive")


@dataclass(frozen=True)
class RadioSystem:
    total_bandwidth_hz: float = 1e6
    noise_dbm_per_hz: float = -174.0
    model_size_bits: float = 19520.0
    noise_bandwidth: str = "allocated"  # or "total"

    def __post_init__(self):
        if not (self.total_bandwidth_hz > 0 and self.model_size_bits > 0):
            raise ContractError("total_bandwidth_hz and model_size_bits must be positive")
        if self.noise_bandwidth not in ("allocated", "total"):
            raise ContractError(f"noise_bandwidth must be 'allocated' or 'total', got {self.noise_bandwidth!r}")


def sample_computation_latency(p: ClientProfile, rng: np.random.Generator) -> float:
    """Inverse-CDF draw from the shifted exponential with shift ``x*d`` and rate ``mu/d``."""
    u = rng.random()
    d = p.data_size
    return p.x * d - (d / p.mu) * math.log1p(-u)


def computation_latency_cdf(p: ClientProfile, t: float) -> float:
    d = p.data_size
    if t < p.x * d:
        return 0.0
    return 1.0 - math.exp(-(p.mu / d) * (t - p.x * d))


def expected_computation_latency(p: ClientProfile) -> float:
    return p.x * p.data_size + p.data_size / p.mu


def path_loss_db(distance_km: float) -> float:
    return 100.7 + 23.5 * math.log10(distance_km)


def snr_db(p: ClientProfile, sys: RadioSystem) -> float:
    noise_bw = p.gamma * sys.total_bandwidth_hz if sys.noise_bandwidth == "allocated" else sys.total_bandwidth_hz
    received_dbm = p.power_dbm - path_loss_db(p.distance_km)
    noise_dbm = sys.noise_dbm_per_hz + 10.0 * math.log10(noise_bw)
    lo, hi = SNR_DB_RANGE
    return min(max(received_dbm - noise_dbm, lo), hi)


def uplink_rate_bps(p: ClientProfile, sys: RadioSystem) -> float:
    return p.gamma * sys.total_bandwidth_hz * math.log2(1.0 + 10.0 ** (snr_db(p, sys) / 10.0))


def communication_latency(p: ClientProfile, sys: RadioSystem) -> float:
    return 1000.0 * sys.model_size_bits / uplink_rate_bps(p, sys)


def total_update_latency(
    p: ClientProfile, sys: RadioSystem, mode: str = "expected", rng: np.random.Generator | None = None
) -> float:
    if mode == "expected":
        return communication_latency(p, sys) + expected_computation_latency(p)
    if mode == "sampled":
        if rng is None:
            raise ContractError("sampled latency needs an rng")
        return communication_latency(p, sys) + sample_computation_latency(p, rng)
    raise ContractError(f"unknown latency mode {mode!r}")


def normalize_latencies(ts: Sequence[float], normalization: str = "variance") -> np.ndarray:
    """Center latencies and divide by the population variance (or std).

    Dividing by the variance is the default; pass ``normalization="stddev"``
    for a z-score.
    """
    t = np.asarray(ts, dtype=float)
    if t.size < 2:
        raise ContractError("need at least two latencies to normalize")
    avg = t.mean()
    var = np.mean((t - avg) ** 2)
    if var == 0:
        raise DegenerateInputError("latencies have zero variance")
    if normalization == "variance":
        scale = var
    elif normalization == "stddev":
        scale = math.sqrt(var)
    else:
        raise ConfigError(f"normalization must be 'variance' or 'stddev', got {normalization!r}")
    return (t - avg) / scale


def generate_profiles(
    data_sizes: Sequence[int],
    seed: int = 0,
    latency_range_ms: tuple[float, float] = (1000.0, 15000.0),
    fluctuation_range: tuple[float, float] = (0.1, 0.3),
    power_dbm_range: tuple[float, float] = (10.0, 23.0),
    gamma_range: tuple[float, float] = (0.01, 0.1),
    distance_km_range: tuple[float, float] = (0.1, 1.0),
) -> list[ClientProfile]:
    """Draw one profile per client.

    A target expected compute latency is drawn log-uniformly from
    ``latency_range_ms`` and a fluctuation share ``f`` uniformly from
    ``fluctuation_range``; then ``x = (1 - f) * target / d`` and
    ``mu = d / (f * target)`` so that ``x*d + d/mu`` equals the target.
    """
    lo, hi = latency_range_ms
    if not 0 < lo <= hi:
        raise ConfigError("latency_range_ms must satisfy 0 < lo <= hi")
    if not 0 < fluctuation_range[0] <= fluctuation_range[1] < 1:
        raise ConfigError("fluctuation_range must lie inside (0, 1)")
    rng = np.random.default_rng(seed)
    out = []
    for cid, d in enumerate(data_sizes):
        target = math.exp(rng.uniform(math.log(lo), math.log(hi)))
        f = rng.uniform(*fluctuation_range)
        out.append(
            ClientProfile(
                client_id=cid,
                data_size=int(d),
                x=(1.0 - f) * target / d,
                mu=d / (f * target),
                power_dbm=float(rng.uniform(*power_dbm_range)),
                gamma=float(rng.uniform(*gamma_range)),
                distance_km=float(rng.uniform(*distance_km_range)),
            )
        )
    return out


def save_profiles(profiles: Sequence[ClientProfile], sys: RadioSystem, path: str | Path) -> None:
    doc = {"radio_system": asdict(sys), "clients": [asdict(p) for p in profiles]}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_profiles(path: str | Path) -> tuple[list[ClientProfile], RadioSystem]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "clients" not in doc or "radio_system" not in doc:
        raise ParseError(f"{path}: expected keys 'radio_system' and 'clients'")
    try:
        sys = RadioSystem(**doc["radio_system"])
    except (TypeError, ContractError) as exc:
        raise ParseError(f"{path}: radio_system: {exc}") from None
    profiles = []
    for i, rec in enumerate(doc["clients"]):
        try:
            profiles.append(ClientProfile(**rec))
        except (TypeError, ContractError) as exc:
            raise ParseError(f"{path}: clients[{i}]: {exc}") from None
        if profiles[-1].client_id != i:
            raise ParseError(f"{path}: clients[{i}] has client_id {profiles[-1].client_id}")
    return profiles, sys
