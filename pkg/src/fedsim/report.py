"""Metrics, CSV emission, and cross-run comparison tables."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from fedsim.data import ClientShard
from fedsim.errors import DegenerateInputError, ParseError
from fedsim.model import ModelParams, count_correct
from fedsim.sim import SimulationTrace

METRICS_HEADER = ["round", "protocol", "group_id", "weighted_accuracy", "mean_loss", "commits", "forced_syncs"]
EVENTS_HEADER = ["time_ms", "round", "group_id", "client_id", "kind", "group_version"]
IDLE_HEADER = ["round", "group_id", "client_id", "idle_ms"]


def fmt(v: float) -> str:
    return format(float(v), ".9g")


def weighted_accuracy(groups: Sequence[tuple[ModelParams, Sequence[ClientShard]]]) -> float:
    """Total correct test predictions over total test samples, each client judged by its group's model."""
    correct = total = 0
    for model, shards in groups:
        for s in shards:
            correct += count_correct(model, s.x_test, s.y_test)[0]
            total += s.n_test
    if total == 0:
        raise DegenerateInputError("no test samples to evaluate")
    return correct / total


@dataclass
class IdleHistogram:
    edges: np.ndarray  # bucket i covers [edges[i], edges[i+1]); last edge is inf
    frequencies: np.ndarray
    threshold_fraction: float
    exceed_fraction: float


def idle_histogram(
    idle_ms: Iterable[float] | SimulationTrace,
    budget_ms: float,
    threshold: float = 0.6,
    n_buckets: int = 10,
) -> IdleHistogram:
    """Normalized histogram of per-client-per-round idle totals.

    Buckets split ``[0, budget_ms)`` evenly, with one more bucket for
    anything at or above the budget. ``exceed_fraction`` is the share of
    observations strictly above ``threshold * budget_ms``.
    """
    if isinstance(idle_ms, SimulationTrace):
        idle_ms = [rec[3] for rec in idle_ms.idle]
    values = np.asarray(list(idle_ms), dtype=float)
    edges = np.append(np.linspace(0.0, budget_ms, n_buckets + 1), np.inf)
    if values.size == 0:
        return IdleHistogram(edges, np.zeros(n_buckets + 1), threshold, 0.0)
    counts = np.histogram(values, bins=edges)[0]
    return IdleHistogram(
        edges,
        counts / values.size,
        threshold,
        float(np.mean(values > threshold * budget_ms)),
    )


def write_metrics(trace: SimulationTrace, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for m in trace.metrics:
            w.writerow([m.round, m.protocol, m.group_id, fmt(m.weighted_accuracy), fmt(m.mean_loss), m.commits, m.forced_syncs])


def write_events(trace: SimulationTrace, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVENTS_HEADER)
        for e in trace.events:
            w.writerow([fmt(e.time_ms), e.round, e.group_id, e.client_id, e.kind.value, e.group_version])


def write_idle(trace: SimulationTrace, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IDLE_HEADER)
        for r, g, c, idle in trace.idle:
            w.writerow([r, g, c, fmt(idle)])


def _read_csv(path: Path, header: list[str]) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != header:
            raise ParseError(f"{path}: expected header {','.join(header)}")
        return list(reader)


@dataclass
class RunSummary:
    run_dir: Path
    protocol: str
    label: str
    budget_ms: float
    accuracy_by_round: np.ndarray
    idle_ms: np.ndarray

    def final_accuracy(self, last: int = 10) -> float:
        return float(self.accuracy_by_round[-last:].mean())


def load_run(run_dir: str | Path) -> RunSummary:
    """Read metrics.csv, idle.csv and run-metadata.json from one run directory."""
    run_dir = Path(run_dir)
    meta_path = run_dir / "run-metadata.json"
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ParseError(f"{meta_path}: missing") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{meta_path}: invalid JSON ({exc})") from None
    test_counts = {int(g): int(n) for g, n in meta["group_test_samples"].items()}
    rows = _read_csv(run_dir / "metrics.csv", METRICS_HEADER)
    n_rounds = max(int(r["round"]) for r in rows)
    correct = np.zeros(n_rounds)
    total = np.zeros(n_rounds)
    for r in rows:
        i, g = int(r["round"]) - 1, int(r["group_id"])
        correct[i] += float(r["weighted_accuracy"]) * test_counts[g]
        total[i] += test_counts[g]
    idle = np.array([float(r["idle_ms"]) for r in _read_csv(run_dir / "idle.csv", IDLE_HEADER)])
    cfg = meta["protocol_config"]
    label = f"{meta.get('dataset_label', 'dataset')}-{fmt(cfg['budget_ms'])}"
    return RunSummary(run_dir, cfg["protocol"], label, float(cfg["budget_ms"]), correct / np.maximum(total, 1), idle)


PROTOCOL_ORDER = ["T_FEDAVG", "TA_FEDAVG", "G_FEDAVG", "GA_FEDAVG", "R_FEDAVG", "NOG_FEDAVG", "CSAFL"]


def _protocol_key(p: str) -> tuple[int, str]:
    return (PROTOCOL_ORDER.index(p) if p in PROTOCOL_ORDER else len(PROTOCOL_ORDER), p)


def build_report(runs: Sequence[RunSummary], out_dir: str | Path, last: int = 10, threshold: float = 0.6) -> dict:
    """Write comparison tables and plot-ready CSVs for ``runs`` into ``out_dir``.

    Files written:

    * ``comparison.csv``: one row per dataset-budget label, one column per
      protocol, cell = mean weighted accuracy (%) over the last ``last`` rounds.
    * ``straggler.csv``: same layout, cell = fraction of idle observations
      above ``threshold`` of the budget.
    * ``accuracy_vs_round.csv``: long format ``label,protocol,round,weighted_accuracy``.
    * ``idle_histogram.csv``: long format ``label,protocol,bucket_lo_ms,bucket_hi_ms,frequency``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = sorted({r.label for r in runs})
    protocols = sorted({r.protocol for r in runs}, key=_protocol_key)
    by_key = {}
    for r in runs:
        by_key[(r.label, r.protocol)] = r

    acc_table: dict[str, dict[str, float]] = {}
    exceed_table: dict[str, dict[str, float]] = {}
    for table, value in (
        (acc_table, lambda r: 100.0 * r.final_accuracy(last)),
        (exceed_table, lambda r: idle_histogram(r.idle_ms, r.budget_ms, threshold).exceed_fraction),
    ):
        for lab in labels:
            table[lab] = {p: value(by_key[(lab, p)]) for p in protocols if (lab, p) in by_key}

    for name, table in (("comparison.csv", acc_table), ("straggler.csv", exceed_table)):
        with open(out / name, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["dataset_budget"] + protocols)
            for lab in labels:
                w.writerow([lab] + [fmt(table[lab][p]) if p in table[lab] else "" for p in protocols])

    with open(out / "accuracy_vs_round.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "protocol", "round", "weighted_accuracy"])
        for lab in labels:
            for p in protocols:
                if (lab, p) in by_key:
                    for i, a in enumerate(by_key[(lab, p)].accuracy_by_round, start=1):
                        w.writerow([lab, p, i, fmt(a)])

    with open(out / "idle_histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "protocol", "bucket_lo_ms", "bucket_hi_ms", "frequency"])
        for lab in labels:
            for p in protocols:
                if (lab, p) in by_key:
                    r = by_key[(lab, p)]
                    h = idle_histogram(r.idle_ms, r.budget_ms, threshold)
                    for lo, hi, f in zip(h.edges[:-1], h.edges[1:], h.frequencies):
                        w.writerow([lab, p, fmt(lo), fmt(hi), fmt(f)])

    return {"accuracy": acc_table, "exceed_fraction": exceed_table, "protocols": protocols, "labels": labels}
