"""Virtual-time simulation of synchronous, asynchronous and semi-asynchronous rounds.

Every group runs its round independently on its own virtual clock starting
at 0. Random draws are keyed by ``(seed, stream, round, client, update
index)`` so results never depend on processing order.
"""

from __future__ import annotations

import heapq
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from fedsim.cluster import GroupAssignment
from fedsim.data import FederatedDataset
from fedsim.errors import ConfigError
from fedsim.latency import (
    ClientProfile,
    RadioSystem,
    communication_latency,
    expected_computation_latency,
    sample_computation_latency,
)
from fedsim.model import ModelParams, TrainingConfig, client_update, count_correct, fedavg_aggregate

SELECT_STREAM = 1
TRAIN_STREAM = 2
LATENCY_STREAM = 3
GROUPING_STREAM = 4


class Protocol(str, Enum):
    T_FEDAVG = "T_FEDAVG"
    TA_FEDAVG = "TA_FEDAVG"
    G_FEDAVG = "G_FEDAVG"
    GA_FEDAVG = "GA_FEDAVG"
    R_FEDAVG = "R_FEDAVG"
    NOG_FEDAVG = "NOG_FEDAVG"
    CSAFL = "CSAFL"


class EventKind(str, Enum):
    ASYNC_COMMIT = "async_commit"
    SYNC_BARRIER = "sync_barrier"
    DOWNLOAD = "download"


@dataclass(frozen=True)
class ProtocolConfig:
    protocol: Protocol = Protocol.CSAFL
    rounds: int = 100
    budget_ms: float = 15000.0
    delay_threshold: int = 4
    clients_per_round: int = 20
    training: TrainingConfig = field(default_factory=TrainingConfig)
    seed: int = 0
    commit_mode: str = "replace"  # or "mix"
    mix_alpha: float = 0.5
    pull_on_commit: bool = False
    latency_mode: str = "sampled"  # or "expected"
    latency_redraw: str = "per_update"  # or "per_round"
    r_fedavg_update: str = "semi_async"  # or "sync"

    def __post_init__(self):
        object.__setattr__(self, "protocol", Protocol(self.protocol))
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if not self.budget_ms > 0:
            raise ConfigError("budget_ms must be positive")
        if self.delay_threshold < 0:
            raise ConfigError("delay_threshold must be >= 0")
        if self.clients_per_round < 1:
            raise ConfigError("clients_per_round must be >= 1")
        choices = {
            "commit_mode": ("replace", "mix"),
            "latency_mode": ("sampled", "expected"),
            "latency_redraw": ("per_update", "per_round"),
            "r_fedavg_update": ("semi_async", "sync"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {allowed}, got {getattr(self, key)!r}")
        if self.commit_mode == "mix" and not 0 < self.mix_alpha <= 1:
            raise ConfigError("mix_alpha must be in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = self.protocol.value
        return d


@dataclass
class CommitEvent:
    time_ms: float
    round: int
    group_id: int
    client_id: int
    kind: EventKind
    group_version: int


@dataclass
class GroupState:
    group_id: int
    members: list[int]
    model: ModelParams
    version: int = 0


@dataclass
class RoundOutcome:
    events: list[CommitEvent]
    idle_ms: dict[int, float]
    commits: int = 0
    forced_syncs: int = 0


@dataclass
class RoundMetrics:
    round: int
    protocol: str
    group_id: int
    weighted_accuracy: float
    mean_loss: float
    commits: int
    forced_syncs: int
    test_samples: int = 0


@dataclass
class SimulationTrace:
    protocol: str
    groups: list[list[int]]
    metrics: list[RoundMetrics] = field(default_factory=list)
    events: list[CommitEvent] = field(default_factory=list)
    # (round, group_id, client_id, idle_ms) for every selected client
    idle: list[tuple[int, int, int, float]] = field(default_factory=list)
    final_models: list[ModelParams] = field(default_factory=list)

    def round_accuracy(self) -> np.ndarray:
        """Weighted test accuracy over all clients, one value per round."""
        rounds = max(m.round for m in self.metrics)
        correct = np.zeros(rounds)
        total = np.zeros(rounds)
        for m in self.metrics:
            correct[m.round - 1] += m.weighted_accuracy * m.test_samples
            total[m.round - 1] += m.test_samples
        return correct / np.maximum(total, 1)


class RoundContext:
    """Everything a group round needs besides the group itself."""

    def __init__(self, ds: FederatedDataset, profiles: Sequence[ClientProfile], sys: RadioSystem, cfg: ProtocolConfig, round_idx: int = 1):
        self.ds = ds
        self.profiles = {p.client_id: p for p in profiles}
        self.sys = sys
        self.cfg = cfg
        self.round_idx = round_idx
        self._comm = {cid: communication_latency(p, sys) for cid, p in self.profiles.items()}

    def latency(self, cid: int, k: int) -> float:
        p = self.profiles[cid]
        if self.cfg.latency_mode == "expected":
            return self._comm[cid] + expected_computation_latency(p)
        draw = k if self.cfg.latency_redraw == "per_update" else 0
        rng = np.random.default_rng([self.cfg.seed, LATENCY_STREAM, self.round_idx, cid, draw])
        return self._comm[cid] + sample_computation_latency(p, rng)

    def train(self, cid: int, start: ModelParams, k: int) -> ModelParams:
        shard = self.ds.shards[cid]
        seed = [self.cfg.seed, TRAIN_STREAM, self.round_idx, cid, k]
        return client_update(start, shard.x_train, shard.y_train, self.cfg.training, seed)

    def n_train(self, cid: int) -> int:
        return self.ds.shards[cid].n_train


def select_clients(all_ids: Sequence[int], k: int, rng: np.random.Generator) -> list[int]:
    """Uniform sample of ``k`` ids without replacement, returned sorted."""
    ids = sorted(all_ids)
    if not 1 <= k <= len(ids):
        raise ConfigError(f"cannot select {k} clients from {len(ids)}")
    if k == len(ids):
        return ids
    return sorted(int(c) for c in rng.choice(ids, size=k, replace=False))


def _sorted_events(events: list[CommitEvent]) -> list[CommitEvent]:
    return sorted(events, key=lambda e: (e.time_ms, e.client_id))


def run_round_sync(group: GroupState, selected: Sequence[int], ctx: RoundContext) -> RoundOutcome:
    """Repeated FedAvg barriers until the round budget is used up.

    All selected clients start each inner iteration together from the group
    model; the iteration ends when the slowest finishes. A new iteration
    starts only while the barrier time is below the budget.
    """
    H = ctx.cfg.budget_ms
    r = ctx.round_idx
    out = RoundOutcome([], {c: 0.0 for c in selected})
    t = 0.0
    k = 0
    while t < H:
        finish, models = {}, {}
        for cid in selected:
            finish[cid] = t + ctx.latency(cid, k)
            models[cid] = ctx.train(cid, group.model, k)
        order = sorted(selected, key=lambda c: (finish[c], c))
        for cid in order:
            group.version += 1
            out.events.append(CommitEvent(finish[cid], r, group.group_id, cid, EventKind.SYNC_BARRIER, group.version))
        barrier = max(finish.values())
        group.model = fedavg_aggregate([(models[c], ctx.n_train(c)) for c in selected])
        for cid in selected:
            out.idle_ms[cid] += barrier - finish[cid]
            out.events.append(CommitEvent(barrier, r, group.group_id, cid, EventKind.DOWNLOAD, group.version))
        out.commits += len(selected)
        t = barrier
        k += 1
    out.events = _sorted_events(out.events)
    return out


@dataclass
class _ClientState:
    cid: int
    w: ModelParams
    v_prev: int = 0
    v_new: int = 0
    updates: int = 0
    finish: float = 0.0
    status: str = "idle"  # idle | async | sync | done


def run_round_semi_async(
    group: GroupState, selected: Sequence[int], ctx: RoundContext, threshold: int | None
) -> RoundOutcome:
    """Asynchronous commits with staleness-triggered synchronous barriers.

    Each client trains from its own last model and commits to the group on
    completion, bumping the group version. Before a client starts an
    update it checks how many group versions passed between its last two
    commits; above ``threshold`` every client with budget left joins a
    barrier (in-flight updates finish and commit first). ``threshold=None``
    never triggers, giving plain asynchronous rounds.
    """
    cfg = ctx.cfg
    H = cfg.budget_ms
    r = ctx.round_idx
    gid = group.group_id
    clients = {cid: _ClientState(cid, group.model.copy()) for cid in selected}
    out = RoundOutcome([], {cid: 0.0 for cid in selected})
    heap: list[tuple[float, int, int]] = []
    seq = 0
    barrier: dict | None = None

    def schedule(c: _ClientState, t: float, status: str):
        nonlocal seq
        c.status = status
        c.finish = t + ctx.latency(c.cid, c.updates)
        heapq.heappush(heap, (c.finish, c.cid, seq))
        seq += 1

    def begin(c: _ClientState, t: float):
        nonlocal barrier
        if t >= H:
            c.status = "done"
            return
        if barrier is None and threshold is not None and c.v_new - c.v_prev > threshold:
            out.forced_syncs += 1
            joiners = {c.cid}
            joiners.update(o.cid for o in clients.values() if o.status == "async" and o.finish < H)
            barrier = {"expected": joiners, "arrived": {}}
        if barrier is not None:
            schedule(c, t, "sync")
            return
        if cfg.pull_on_commit:
            c.w = group.model.copy()
        schedule(c, t, "async")

    def commit(c: _ClientState):
        if cfg.commit_mode == "replace":
            group.model = c.w.copy()
        else:
            a = cfg.mix_alpha
            group.model = ModelParams(
                (1 - a) * group.model.weights + a * c.w.weights, (1 - a) * group.model.bias + a * c.w.bias
            )

    def complete_barrier(t: float):
        nonlocal barrier
        arrived = barrier["arrived"]
        ids = sorted(arrived)
        agg = fedavg_aggregate([(clients[cid].w, ctx.n_train(cid)) for cid in ids])
        group.model = agg
        for cid in ids:
            c = clients[cid]
            c.w = agg.copy()
            c.v_prev = c.v_new = group.version
            out.idle_ms[cid] += t - arrived[cid]
            out.events.append(CommitEvent(t, r, gid, cid, EventKind.DOWNLOAD, group.version))
        barrier = None
        for cid in ids:
            begin(clients[cid], t)

    for cid in sorted(selected):
        begin(clients[cid], 0.0)

    while heap:
        t, cid, _ = heapq.heappop(heap)
        c = clients[cid]
        c.w = ctx.train(cid, c.w, c.updates)
        c.updates += 1
        group.version += 1
        out.commits += 1
        if c.status == "async":
            commit(c)
            c.v_prev, c.v_new = c.v_new, group.version
            out.events.append(CommitEvent(t, r, gid, cid, EventKind.ASYNC_COMMIT, group.version))
            begin(c, t)
        else:
            out.events.append(CommitEvent(t, r, gid, cid, EventKind.SYNC_BARRIER, group.version))
            barrier["arrived"][cid] = t
            c.status = "waiting"
            if set(barrier["arrived"]) == barrier["expected"]:
                complete_barrier(t)

    out.events = _sorted_events(out.events)
    return out


def run_round_async(group: GroupState, selected: Sequence[int], ctx: RoundContext) -> RoundOutcome:
    return run_round_semi_async(group, selected, ctx, threshold=None)


def run_round_csafl(group: GroupState, selected: Sequence[int], ctx: RoundContext) -> RoundOutcome:
    return run_round_semi_async(group, selected, ctx, threshold=ctx.cfg.delay_threshold)


_UPDATE_RULE = {
    Protocol.T_FEDAVG: "sync",
    Protocol.G_FEDAVG: "sync",
    Protocol.TA_FEDAVG: "async",
    Protocol.GA_FEDAVG: "async",
    Protocol.CSAFL: "semi_async",
    Protocol.NOG_FEDAVG: "semi_async",
}


def update_rule(cfg: ProtocolConfig) -> str:
    if cfg.protocol is Protocol.R_FEDAVG:
        return cfg.r_fedavg_update
    return _UPDATE_RULE[cfg.protocol]


def random_grouping(client_ids: Sequence[int], n_groups: int, seed: int) -> GroupAssignment:
    """Seeded random split into ``n_groups`` groups whose sizes differ by at most one."""
    ids = sorted(client_ids)
    if not 1 <= n_groups <= len(ids):
        raise ConfigError(f"n_groups={n_groups} must be in [1, {len(ids)}]")
    perm = np.random.default_rng([seed, GROUPING_STREAM]).permutation(ids)
    group_of = {}
    for g, chunk in enumerate(np.array_split(perm, n_groups)):
        for cid in chunk:
            group_of[int(cid)] = g
    return GroupAssignment(group_of, n_groups)


def protocol_groups(cfg: ProtocolConfig, assignment: GroupAssignment | None, client_ids: Sequence[int]) -> GroupAssignment:
    if cfg.protocol in (Protocol.T_FEDAVG, Protocol.TA_FEDAVG, Protocol.NOG_FEDAVG):
        return GroupAssignment.single(client_ids)
    if assignment is None:
        raise ConfigError(f"protocol {cfg.protocol.value} needs a group assignment")
    assignment.validate(len(client_ids))
    if cfg.protocol is Protocol.R_FEDAVG:
        return random_grouping(client_ids, assignment.n_groups, cfg.seed)
    return assignment


def run_experiment(
    ds: FederatedDataset,
    assignment: GroupAssignment | None,
    profiles: Sequence[ClientProfile],
    sys: RadioSystem,
    cfg: ProtocolConfig,
    w0: ModelParams | None = None,
) -> SimulationTrace:
    """Simulate ``cfg.rounds`` rounds of ``cfg.protocol`` and evaluate every group after each round."""
    ids = [s.client_id for s in ds.shards]
    if len(profiles) != len(ids) or sorted(p.client_id for p in profiles) != ids:
        raise ConfigError("profiles do not match dataset clients")
    if cfg.clients_per_round > len(ids):
        raise ConfigError(f"clients_per_round={cfg.clients_per_round} exceeds {len(ids)} clients")
    grouping = protocol_groups(cfg, assignment, ids)
    members = grouping.members()
    if w0 is None:
        w0 = ModelParams.zeros(ds.num_classes, ds.feature_dim)
    groups = [GroupState(g, m, w0.copy()) for g, m in enumerate(members)]
    rule = update_rule(cfg)

    test_sets = []
    for m in members:
        xs = [ds.shards[c].x_test for c in m]
        ys = [ds.shards[c].y_test for c in m]
        test_sets.append((np.concatenate(xs), np.concatenate(ys)))

    trace = SimulationTrace(cfg.protocol.value, members)
    for r in range(1, cfg.rounds + 1):
        ctx = RoundContext(ds, profiles, sys, cfg, r)
        selected = select_clients(ids, cfg.clients_per_round, np.random.default_rng([cfg.seed, SELECT_STREAM, r]))
        for g in groups:
            sel = [c for c in selected if grouping.group_of[c] == g.group_id]
            outcome = RoundOutcome([], {})
            if sel:
                g.version = 0
                if rule == "sync":
                    outcome = run_round_sync(g, sel, ctx)
                elif rule == "async":
                    outcome = run_round_async(g, sel, ctx)
                else:
                    outcome = run_round_csafl(g, sel, ctx)
            trace.events.extend(outcome.events)
            trace.idle.extend((r, g.group_id, c, outcome.idle_ms[c]) for c in sel)
            x_test, y_test = test_sets[g.group_id]
            correct, loss_sum = count_correct(g.model, x_test, y_test)
            n = int(y_test.shape[0])
            trace.metrics.append(
                RoundMetrics(
                    r,
                    cfg.protocol.value,
                    g.group_id,
                    correct / n if n else 0.0,
                    loss_sum / n if n else 0.0,
                    outcome.commits,
                    outcome.forced_syncs,
                    n,
                )
            )
    trace.final_models = [g.model for g in groups]
    return trace
