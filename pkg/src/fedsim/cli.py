"""Command-line entry point: ``fedsim {gen-data,gen-profiles,cluster,run,report}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from fedsim import __version__
from fedsim.cluster import ClusterConfig, group_clients, load_assignment, save_assignment, save_matrix
from fedsim.data import generate_synthetic, load_dataset, partition_by_power_law, save_dataset
from fedsim.errors import ConfigError, FedSimError
from fedsim.latency import RadioSystem, generate_profiles, load_profiles, save_profiles
from fedsim.model import TrainingConfig
from fedsim.report import build_report, fmt, load_run, write_events, write_idle, write_metrics
from fedsim.sim import ProtocolConfig, run_experiment

logger = logging.getLogger("fedsim")

RUN_PATH_KEYS = ("dataset", "profiles", "assignment", "output_dir", "dataset_label")


def _pair(text: str) -> tuple[float, float]:
    lo, hi = (float(v) for v in text.split(","))
    return lo, hi


def cmd_gen_data(args) -> None:
    if args.pool:
        pool = np.loadtxt(args.pool, delimiter=",", ndmin=2)
        ds = partition_by_power_law(
            pool[:, 1:],
            pool[:, 0].astype(np.int64),
            args.num_clients,
            args.classes_per_client,
            test_fraction=args.test_fraction,
            seed=args.seed,
            min_count=args.min_samples,
            exponent=args.exponent,
        )
        print(f"dropped {ds.dropped} pool samples")
    else:
        ds = generate_synthetic(
            args.alpha,
            args.beta,
            num_clients=args.num_clients,
            feature_dim=args.feature_dim,
            num_classes=args.num_classes,
            samples_power_law=(args.min_samples, args.exponent),
            test_fraction=args.test_fraction,
            seed=args.seed,
            total_samples=args.total_samples,
        )
    save_dataset(ds, args.out)
    print(f"wrote {ds.num_clients} clients, {ds.total_samples()} samples to {args.out}")


def cmd_gen_profiles(args) -> None:
    ds = load_dataset(args.dataset)
    profiles = generate_profiles(
        ds.train_sizes().tolist(),
        seed=args.seed,
        latency_range_ms=args.latency_range,
        fluctuation_range=args.fluctuation_range,
        power_dbm_range=args.power_range,
        gamma_range=args.gamma_range,
        distance_km_range=args.distance_range,
    )
    model_bits = args.model_bits or 32.0 * (ds.num_classes * ds.feature_dim + ds.num_classes)
    sys_ = RadioSystem(args.bandwidth, args.noise, model_bits, args.noise_bandwidth)
    save_profiles(profiles, sys_, args.out)
    print(f"wrote {len(profiles)} profiles to {args.out}")


def cmd_cluster(args) -> None:
    ds = load_dataset(args.dataset)
    profiles, sys_ = load_profiles(args.profiles)
    cfg = ClusterConfig(
        beta=args.beta,
        sigma=args.sigma,
        n_groups=args.n_groups,
        pretrain=TrainingConfig(args.learning_rate, args.batch_size, args.epochs),
        seed=args.seed,
        normalization=args.normalization,
        affinity_exponent=args.affinity_exponent,
    )
    res = group_clients(ds, profiles, sys_, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_assignment(res.assignment, out / "assignment.csv")
    groups = []
    for g, members in enumerate(res.assignment.members()):
        lat = [res.latencies_ms[c] for c in members]
        groups.append(
            {
                "group_id": g,
                "size": len(members),
                "clients": members,
                "latency_ms_min": min(lat),
                "latency_ms_max": max(lat),
                "train_samples": int(sum(ds.shards[c].n_train for c in members)),
            }
        )
    report = {"config": asdict(cfg), "groups": groups, "fedsim_version": __version__}
    (out / "cluster-report.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if args.dump_affinity:
        save_matrix(res.affinity, out / "affinity.txt")
    for g in groups:
        print(f"group {g['group_id']}: {g['size']} clients, latency {g['latency_ms_min']:.0f}-{g['latency_ms_max']:.0f} ms")


def load_run_config(path: str | Path) -> tuple[dict, ProtocolConfig]:
    """Parse a run config; unknown or missing keys raise ``ConfigError`` naming the key."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    known = set(RUN_PATH_KEYS) | {f.name for f in fields(ProtocolConfig)}
    for key in doc:
        if key not in known:
            raise ConfigError(f"unknown config key '{key}'")
    for key in ("dataset", "profiles", "output_dir"):
        if key not in doc:
            raise ConfigError(f"missing required config key '{key}'")
    for key in ("dataset", "profiles", "assignment"):
        if key in doc and not Path(doc[key]).is_file():
            raise ConfigError(f"config key '{key}': file {doc[key]} not found")
    proto_kwargs = {k: v for k, v in doc.items() if k not in RUN_PATH_KEYS}
    if "training" in proto_kwargs:
        try:
            proto_kwargs["training"] = TrainingConfig(**proto_kwargs["training"])
        except TypeError as exc:
            raise ConfigError(f"config key 'training': {exc}") from None
    try:
        cfg = ProtocolConfig(**proto_kwargs)
    except FedSimError:
        raise
    except ValueError as exc:
        raise ConfigError(f"config key 'protocol': {exc}") from None
    return doc, cfg


def cmd_run(args) -> None:
    doc, cfg = load_run_config(args.config)
    ds = load_dataset(doc["dataset"])
    profiles, sys_ = load_profiles(doc["profiles"])
    assignment = load_assignment(doc["assignment"]) if doc.get("assignment") else None
    trace = run_experiment(ds, assignment, profiles, sys_, cfg)

    out = Path(doc["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(trace, out / "metrics.csv")
    write_events(trace, out / "events.csv")
    write_idle(trace, out / "idle.csv")
    test_counts = {}
    for m in trace.metrics:
        test_counts[str(m.group_id)] = m.test_samples
    meta = {
        "fedsim_version": __version__,
        "config_file": str(args.config),
        "dataset": doc["dataset"],
        "profiles": doc["profiles"],
        "assignment": doc.get("assignment"),
        "dataset_label": doc.get("dataset_label", Path(doc["dataset"]).stem),
        "protocol_config": cfg.to_dict(),
        "radio_system": asdict(sys_),
        "groups": trace.groups,
        "group_test_samples": test_counts,
    }
    (out / "run-metadata.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    acc = trace.round_accuracy()
    print(f"{cfg.protocol.value}: final-round weighted accuracy {fmt(acc[-1])}; outputs in {out}")


def cmd_report(args) -> None:
    runs = [load_run(d) for d in args.runs]
    res = build_report(runs, args.out, last=args.last, threshold=args.threshold)
    protocols = res["protocols"]
    print("dataset_budget," + ",".join(protocols))
    for lab in res["labels"]:
        row = res["accuracy"][lab]
        print(lab + "," + ",".join(f"{row[p]:.1f}" if p in row else "" for p in protocols))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a Synthetic(alpha, beta) dataset or partition a labelled pool")
    p.add_argument("--out", required=True)
    p.add_argument("--pool", help="CSV of 'label,f1,...,fF' rows to partition instead of generating")
    p.add_argument("--alpha", type=float, default=0.8)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--num-clients", type=int, default=100)
    p.add_argument("--feature-dim", type=int, default=60)
    p.add_argument("--num-classes", type=int, default=10)
    p.add_argument("--classes-per-client", type=int, default=2)
    p.add_argument("--min-samples", type=int, default=10)
    p.add_argument("--exponent", type=float, default=1.1)
    p.add_argument("--total-samples", type=int, default=75349)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-profiles", help="draw per-client latency and radio profiles")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latency-range", type=_pair, default=(1000.0, 15000.0), metavar="LO,HI")
    p.add_argument("--fluctuation-range", type=_pair, default=(0.1, 0.3), metavar="LO,HI")
    p.add_argument("--power-range", type=_pair, default=(10.0, 23.0), metavar="LO,HI")
    p.add_argument("--gamma-range", type=_pair, default=(0.01, 0.1), metavar="LO,HI")
    p.add_argument("--distance-range", type=_pair, default=(0.1, 1.0), metavar="LO,HI")
    p.add_argument("--bandwidth", type=float, default=1e6, help="total bandwidth W in Hz")
    p.add_argument("--noise", type=float, default=-174.0, help="noise density N0 in dBm/Hz")
    p.add_argument("--model-bits", type=float, default=None, help="default: 32 bits per model parameter")
    p.add_argument("--noise-bandwidth", choices=["allocated", "total"], default="allocated")
    p.set_defaults(func=cmd_gen_profiles)

    p = sub.add_parser("cluster", help="group clients by update direction and latency")
    p.add_argument("--dataset", required=True)
    p.add_argument("--profiles", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--n-groups", type=int, default=4)
    p.add_argument("--normalization", choices=["variance", "stddev"], default="variance")
    p.add_argument("--affinity-exponent", choices=["norm", "norm_squared"], default="norm")
    p.add_argument("--learning-rate", type=float, default=0.03)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dump-affinity", action="store_true")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("run", help="simulate one protocol from a JSON run config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="compare finished runs")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--out", required=True)
    p.add_argument("--last", type=int, default=10, help="rounds averaged for the comparison table")
    p.add_argument("--threshold", type=float, default=0.6, help="idle threshold as a fraction of the budget")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except (FedSimError, OSError) as exc:
        print(f"fedsim {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
