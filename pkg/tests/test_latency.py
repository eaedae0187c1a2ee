import math

import numpy as np
import pytest

from fedsim.errors import ConfigError, ContractError, DegenerateInputError, ParseError
from fedsim.latency import (
    ClientProfile,
    RadioSystem,
    communication_latency,
    computation_latency_cdf,
    expected_computation_latency,
    generate_profiles,
    load_profiles,
    normalize_latencies,
    path_loss_db,
    sample_computation_latency,
    save_profiles,
    total_update_latency,
)

PROFILE = ClientProfile(0, data_size=200, x=0.5, mu=20.0, power_dbm=23.0, gamma=0.1, distance_km=0.5)
SYSTEM = RadioSystem(total_bandwidth_hz=1e6, noise_dbm_per_hz=-174.0, model_size_bits=1e5)
# Hand dB arithmetic: PL = 100.7 + 23.5*lg(0.5) = 93.6258 dB; received -70.6258 dBm;
# noise -174 + 10*lg(1e5) = -124 dBm; SNR 53.3742 dB; rate 1e5*log2(1+10^5.33742) b/s.
HAND_COMM_MS = 56.39988148058887


def test_expected_computation_latency():
    assert expected_computation_latency(PROFILE) == pytest.approx(110.0)


def test_expected_latency_large_mu_approaches_shift():
    p = ClientProfile(0, 200, 0.5, 1e12)
    assert expected_computation_latency(p) == pytest.approx(100.0, abs=1e-6)


def test_zero_data_size_rejected():
    with pytest.raises(ContractError):
        ClientProfile(0, data_size=0, x=0.5, mu=20.0)


def test_samples_respect_shift_and_mean():
    rng = np.random.default_rng(0)
    draws = np.array([sample_computation_latency(PROFILE, rng) for _ in range(100_000)])
    assert draws.min() >= 100.0
    assert abs(draws.mean() - 110.0) / 110.0 < 0.01


def test_cdf_boundary():
    assert computation_latency_cdf(PROFILE, 100.0) == 0.0
    assert computation_latency_cdf(PROFILE, 99.0) == 0.0
    assert 0 < computation_latency_cdf(PROFILE, 120.0) < 1


def test_path_loss_at_one_km():
    assert path_loss_db(1.0) == 100.7


def test_communication_latency_hand_calculation():
    assert communication_latency(PROFILE, SYSTEM) == pytest.approx(HAND_COMM_MS, rel=1e-6)


def test_model_size_scales_linearly():
    double = RadioSystem(1e6, -174.0, 2e5)
    assert communication_latency(PROFILE, double) == pytest.approx(2 * communication_latency(PROFILE, SYSTEM), rel=1e-15)


def test_noise_bandwidth_switch():
    total = RadioSystem(1e6, -174.0, 1e5, noise_bandwidth="total")
    assert communication_latency(PROFILE, total) > communication_latency(PROFILE, SYSTEM)


def test_monotone_in_distance_and_power():
    def lat(**kw):
        fields = dict(client_id=0, data_size=200, x=0.5, mu=20.0, power_dbm=23.0, gamma=0.1, distance_km=0.5)
        fields.update(kw)
        return communication_latency(ClientProfile(**fields), SYSTEM)

    by_r = [lat(distance_km=r) for r in np.linspace(0.05, 5, 40)]
    by_p = [lat(power_dbm=p) for p in np.linspace(0, 30, 40)]
    assert all(b > a for a, b in zip(by_r, by_r[1:]))
    assert all(b < a for a, b in zip(by_p, by_p[1:]))


def test_total_latency_modes():
    comm = communication_latency(PROFILE, SYSTEM)
    assert total_update_latency(PROFILE, SYSTEM, "expected") == pytest.approx(110.0 + HAND_COMM_MS, rel=1e-9)
    rng = np.random.default_rng(1)
    for _ in range(100):
        assert total_update_latency(PROFILE, SYSTEM, "sampled", rng) >= comm + 100.0
    with pytest.raises(ContractError):
        total_update_latency(PROFILE, SYSTEM, "sampled")


def test_sampling_deterministic_under_seed():
    a = [sample_computation_latency(PROFILE, np.random.default_rng(5)) for _ in range(3)]
    assert a[0] == a[1] == a[2]


def test_normalize_latencies_examples():
    assert normalize_latencies([1, 2, 3]).tolist() == [-1.5, 0.0, 1.5]
    out = normalize_latencies(np.random.default_rng(0).uniform(1000, 15000, 50))
    assert abs(out.mean()) < 1e-10
    z = normalize_latencies([1, 2, 3], "stddev")
    assert z == pytest.approx([-math.sqrt(1.5), 0.0, math.sqrt(1.5)])
    with pytest.raises(DegenerateInputError):
        normalize_latencies([4, 4, 4])
    with pytest.raises(ConfigError):
        normalize_latencies([1, 2], "bogus")


def test_generated_profiles_hit_target_range():
    sizes = [10, 100, 1000, 5000] * 10
    profiles = generate_profiles(sizes, seed=3)
    lat = [expected_computation_latency(p) for p in profiles]
    assert min(lat) >= 1000 - 1e-6 and max(lat) <= 15000 + 1e-6
    assert [p.data_size for p in profiles] == sizes
    assert generate_profiles(sizes, seed=3) == profiles


def test_profiles_file_round_trip(tmp_path):
    profiles = generate_profiles([20, 30, 40], seed=1)
    path = tmp_path / "profiles.json"
    save_profiles(profiles, SYSTEM, path)
    loaded, sys_ = load_profiles(path)
    assert loaded == profiles and sys_ == SYSTEM


def test_profiles_file_rejects_bad_record(tmp_path):
    path = tmp_path / "profiles.json"
    path.write_text('{"radio_system": {}, "clients": [{"client_id": 0, "data_size": 5, "x": -1, "mu": 1}]}')
    with pytest.raises(ParseError, match=r"clients\[0\]"):
        load_profiles(path)
