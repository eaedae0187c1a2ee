import numpy as np
import pytest

from conftest import toy_dataset
from fedsim.cluster import GroupAssignment
from fedsim.errors import ConfigError
from fedsim.latency import RadioSystem, generate_profiles
from fedsim.model import ModelParams, TrainingConfig, client_update
from fedsim.sim import (
    EventKind,
    GroupState,
    Protocol,
    ProtocolConfig,
    RoundContext,
    random_grouping,
    run_experiment,
    run_round_async,
    run_round_csafl,
    run_round_sync,
    select_clients,
)

TRAIN = TrainingConfig(0.05, 10, 1)


class FixedLatencyContext(RoundContext):
    """Round context whose update latencies are fixed per client."""

    def __init__(self, ds, latencies, cfg):
        super().__init__(ds, generate_profiles(ds.train_sizes(), seed=0), RadioSystem(), cfg)
        self.fixed = latencies

    def latency(self, cid, k):
        return float(self.fixed[cid])


def setup(latencies, **cfg_kw):
    ds = toy_dataset()
    cfg_kw.setdefault("training", TRAIN)
    cfg = ProtocolConfig(**cfg_kw)
    ctx = FixedLatencyContext(ds, latencies, cfg)
    group = GroupState(0, sorted(latencies), ModelParams.zeros(ds.num_classes, ds.feature_dim))
    return ds, ctx, group


def trace_tuples(out):
    return [(e.time_ms, e.client_id, e.kind.value, e.group_version) for e in out.events]


def test_select_clients():
    ids = list(range(10))
    assert select_clients(ids, 10, np.random.default_rng(0)) == ids
    a = select_clients(ids, 4, np.random.default_rng([1, 2]))
    assert a == select_clients(ids, 4, np.random.default_rng([1, 2]))
    assert a == sorted(a) and len(set(a)) == 4
    counts = np.zeros(10)
    rng = np.random.default_rng(5)
    for _ in range(10_000):
        counts[select_clients(ids, 5, rng)] += 1
    assert np.all(np.abs(counts / 10_000 - 0.5) < 0.02)
    with pytest.raises(ConfigError):
        select_clients(ids, 11, rng)


def test_sync_single_iteration():
    _, ctx, g = setup({0: 3000, 1: 9000}, budget_ms=9000)
    out = run_round_sync(g, [0, 1], ctx)
    assert out.idle_ms == {0: 6000.0, 1: 0.0}
    assert out.commits == 2
    assert [e.time_ms for e in out.events if e.kind is EventKind.DOWNLOAD] == [9000.0, 9000.0]


def test_sync_two_iterations_when_barrier_below_budget():
    _, ctx, g = setup({0: 3000, 1: 9000}, budget_ms=10000)
    out = run_round_sync(g, [0, 1], ctx)
    assert out.idle_ms == {0: 12000.0, 1: 0.0}
    assert out.commits == 4
    assert max(e.time_ms for e in out.events) == 18000.0


def test_sync_single_client_and_equal_latencies_have_no_idle():
    _, ctx, g = setup({0: 4000}, budget_ms=15000)
    assert run_round_sync(g, [0], ctx).idle_ms == {0: 0.0}
    _, ctx, g = setup({0: 4000, 1: 4000, 2: 4000}, budget_ms=15000)
    out = run_round_sync(g, [0, 1, 2], ctx)
    assert set(out.idle_ms.values()) == {0.0}
    assert out.commits == 12


def test_sync_matches_fedavg_oracle():
    ds, ctx, g = setup({0: 3000, 1: 5000}, budget_ms=1000)
    w0 = g.model.copy()
    run_round_sync(g, [0, 1], ctx)
    m = [ctx.train(c, w0, 0) for c in (0, 1)]
    n = [ds.shards[c].n_train for c in (0, 1)]
    expect_w = (n[0] * m[0].weights + n[1] * m[1].weights) / sum(n)
    assert np.allclose(g.model.weights, expect_w, atol=1e-12)


def test_async_single_client():
    _, ctx, g = setup({0: 5000}, budget_ms=15000, protocol="TA_FEDAVG")
    out = run_round_async(g, [0], ctx)
    assert out.commits == 3 and g.version == 3
    assert [e.time_ms for e in out.events] == [5000.0, 10000.0, 15000.0]
    assert out.idle_ms == {0: 0.0}


def test_async_last_writer_wins():
    _, ctx, g = setup({0: 2000, 1: 3000}, budget_ms=3500)
    w0 = g.model.copy()
    out = run_round_async(g, [0, 1], ctx)
    # both restart before the budget; in-flight updates still commit afterwards
    assert [(e.time_ms, e.client_id) for e in out.events] == [(2000.0, 0), (3000.0, 1), (4000.0, 0), (6000.0, 1)]
    expect = ctx.train(1, ctx.train(1, w0, 0), 1)
    assert g.model == expect
    assert set(out.idle_ms.values()) == {0.0}


def test_csafl_hand_trace():
    _, ctx, g = setup({0: 2000, 1: 7000}, budget_ms=15000, delay_threshold=1)
    out = run_round_csafl(g, [0, 1], ctx)
    assert trace_tuples(out) == [
        (2000.0, 0, "async_commit", 1),
        (4000.0, 0, "async_commit", 2),
        (6000.0, 0, "async_commit", 3),
        (7000.0, 1, "async_commit", 4),
        (8000.0, 0, "async_commit", 5),
        (10000.0, 0, "sync_barrier", 6),
        (14000.0, 0, "download", 7),
        (14000.0, 1, "sync_barrier", 7),
        (14000.0, 1, "download", 7),
        (16000.0, 0, "async_commit", 8),
        (21000.0, 1, "async_commit", 9),
    ]
    assert out.idle_ms == {0: 4000.0, 1: 0.0}
    assert out.forced_syncs == 1
    assert out.commits == 9


@pytest.mark.parametrize("lat", [{0: 3100}, {0: 1500, 1: 2600, 2: 7300}])
def test_csafl_degenerates_to_async(lat):
    ids = sorted(lat)
    kw = {"budget_ms": 15000}
    if len(lat) > 1:
        kw["delay_threshold"] = 10**9
    _, ctx, g1 = setup(lat, **kw)
    a = run_round_csafl(g1, ids, ctx)
    _, ctx, g2 = setup(lat, **kw)
    b = run_round_async(g2, ids, ctx)
    assert trace_tuples(a) == trace_tuples(b)
    assert g1.model == g2.model
    assert a.forced_syncs == 0


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("threshold", [0, 1, 3])
def test_csafl_invariants(seed, threshold):
    rng = np.random.default_rng(seed)
    lat = {c: float(rng.uniform(500, 9000)) for c in range(5)}
    H = 15000.0
    _, ctx, g = setup(lat, budget_ms=H, delay_threshold=threshold)
    out = run_round_csafl(g, list(range(5)), ctx)
    times = [e.time_ms for e in out.events]
    assert times == sorted(times)
    commits = [e for e in out.events if e.kind is not EventKind.DOWNLOAD]
    assert sorted(e.group_version for e in commits) == list(range(1, len(commits) + 1))
    for c in range(5):
        mine = [e for e in out.events if e.client_id == c]
        last_version, prev_version = 0, 0
        for i, e in enumerate(mine):
            if e.kind is EventKind.ASYNC_COMMIT:
                prev_version, last_version = last_version, e.group_version
                nxt = mine[i + 1] if i + 1 < len(mine) else None
                if last_version - prev_version > threshold and nxt is not None:
                    assert nxt.kind is EventKind.SYNC_BARRIER
                if nxt is not None and nxt.kind is EventKind.ASYNC_COMMIT:
                    assert last_version - prev_version <= threshold
                    assert e.time_ms < H
            elif e.kind is EventKind.DOWNLOAD:
                prev_version = last_version = e.group_version
        assert out.idle_ms[c] >= 0


def test_random_grouping_balanced_and_deterministic():
    a = random_grouping(range(10), 3, seed=4)
    assert a == random_grouping(range(10), 3, seed=4)
    assert sorted(len(m) for m in a.members()) == [3, 3, 4]


def _experiment(protocol, assignment, **kw):
    ds = toy_dataset()
    profiles = generate_profiles(ds.train_sizes(), seed=1, latency_range_ms=(500, 4000))
    kw.setdefault("rounds", 3)
    kw.setdefault("clients_per_round", 3)
    cfg = ProtocolConfig(protocol=protocol, training=TRAIN, budget_ms=5000, **kw)
    return ds, run_experiment(ds, assignment, profiles, RadioSystem(), cfg)


def test_csafl_single_group_equals_nog():
    single = GroupAssignment.single(range(5))
    _, a = _experiment("CSAFL", single)
    _, b = _experiment("NOG_FEDAVG", None)
    assert a.events == b.events
    assert [(m.weighted_accuracy, m.mean_loss, m.commits) for m in a.metrics] == [
        (m.weighted_accuracy, m.mean_loss, m.commits) for m in b.metrics
    ]


def test_one_client_one_round_activates_one_group():
    assignment = GroupAssignment({0: 0, 1: 0, 2: 1, 3: 1, 4: 1}, 2)
    _, trace = _experiment("CSAFL", assignment, rounds=1, clients_per_round=1)
    active = [m for m in trace.metrics if m.commits > 0]
    assert len(active) == 1 and len(trace.metrics) == 2
    assert {e.group_id for e in trace.events} == {active[0].group_id}


def test_g_fedavg_one_iteration_oracle():
    ds = toy_dataset()
    assignment = GroupAssignment({0: 0, 1: 0, 2: 1, 3: 1, 4: 1}, 2)
    profiles = generate_profiles(ds.train_sizes(), seed=1, latency_range_ms=(2000, 4000))
    cfg = ProtocolConfig(protocol="G_FEDAVG", training=TRAIN, budget_ms=100, rounds=1, clients_per_round=5, seed=3)
    trace = run_experiment(ds, assignment, profiles, RadioSystem(), cfg)
    w0 = ModelParams.zeros(3, 4)
    for g, members in enumerate(assignment.members()):
        n = np.array([ds.shards[c].n_train for c in members], dtype=float)
        ws = [client_update(w0, ds.shards[c].x_train, ds.shards[c].y_train, TRAIN, [3, 2, 1, c, 0]) for c in members]
        expect = sum(ni * w.weights for ni, w in zip(n, ws)) / n.sum()
        assert np.allclose(trace.final_models[g].weights, expect, atol=1e-12)


def test_experiment_deterministic():
    assignment = GroupAssignment({0: 0, 1: 0, 2: 1, 3: 1, 4: 1}, 2)
    _, a = _experiment("CSAFL", assignment, delay_threshold=1)
    _, b = _experiment("CSAFL", assignment, delay_threshold=1)
    assert a.events == b.events and a.metrics == b.metrics and a.idle == b.idle


def test_grouped_protocols_need_assignment():
    with pytest.raises(ConfigError):
        _experiment("G_FEDAVG", None)


def test_mix_commit():
    _, ctx, g = setup({0: 5000}, budget_ms=5000, commit_mode="mix", mix_alpha=0.25)
    w0 = g.model.copy()
    run_round_async(g, [0], ctx)
    w1 = ctx.train(0, w0, 0)
    assert np.allclose(g.model.weights, 0.75 * w0.weights + 0.25 * w1.weights, atol=1e-15)


@pytest.mark.parametrize("pull", [False, True])
def test_pull_on_commit(pull):
    _, ctx, g = setup({0: 2000}, budget_ms=3000, commit_mode="mix", mix_alpha=0.5, pull_on_commit=pull)
    w0 = g.model.copy()
    run_round_async(g, [0], ctx)
    w1 = ctx.train(0, w0, 0)
    g1 = ModelParams(0.5 * w0.weights + 0.5 * w1.weights, 0.5 * w0.bias + 0.5 * w1.bias)
    w2 = ctx.train(0, g1 if pull else w1, 1)
    assert np.allclose(g.model.weights, 0.5 * g1.weights + 0.5 * w2.weights, atol=1e-12)


def test_config_validation():
    with pytest.raises(ConfigError):
        ProtocolConfig(commit_mode="average")
    with pytest.raises(ValueError):
        ProtocolConfig(protocol="FEDPROX")
    assert ProtocolConfig(protocol=Protocol.CSAFL).to_dict()["protocol"] == "CSAFL"
