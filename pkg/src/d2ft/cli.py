"""Command-line entry point: ``d2ft <subcommand> --config run.json --out DIR``.

Subcommands read and write plain JSON/CSV files in the output directory, so
each step can run as its own process:

    partition  subnet manifest + initial checkpoint
    score      pre-pass contribution scores
    schedule   per-batch schedule tables for every configured policy
    simulate   simulated device times and balance metrics per schedule
    train      fine-tune every (policy, seed) pair, write histories
    report     join histories and metrics into one comparison table
    run        all of the above in order
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from .checkpoint import atomic_write, load_checkpoint, save_checkpoint, subnet_manifest
from .config import RunConfig, load_run_config, run_config_from_dict
from .cost_sim import (audit_settings, build_hetero_profiles, homogeneous_profiles, metrics_csv,
                       metrics_json, metrics_row, simulate_batch)
from .errors import ConfigError, D2FTError, InputError, NumericError, SchemaError
from .model import SubnetModel, attach_lora, partition_model
from .scheduler import ScheduleTable, capacities_from_budget
from .scoring import ScoreTable, prepass_scores
from .trainer import Policy, PolicyScheduler, epoch_order, make_synthetic_dataset, train

log = logging.getLogger("d2ft")

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_INPUT = 4
EXIT_NUMERIC = 5
EXIT_OTHER = 6

SUMMARY_FIELDS = ("method", "seed", "final_loss", "final_top1", "compute_fraction", "comm_fraction")
REPORT_FIELDS = ("method", "compute_fraction", "comm_fraction", "seeds", "mean_final_loss",
                 "mean_final_top1", "mean_workload_variance", "mean_makespan_ms")


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(r[k]) for k in header])
    return buf.getvalue()


def _read_csv(path: Path) -> list[dict]:
    if not path.exists():
        raise InputError(f"required input missing: {path}")
    with path.open(newline="") as f:
        return list(csv.DictReader(f))


def _read_json(path: Path):
    if not path.exists():
        raise InputError(f"required input missing: {path}")
    return json.loads(path.read_text())


class Run:
    """Resolved config plus output directory and thread count."""

    def __init__(self, config: RunConfig, out: Path, threads: int = 1):
        self.config, self.out, self.threads = config, out, threads
        self.out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / "resolved_config.json", config.to_json())

    def write(self, name: str, text: str) -> None:
        atomic_write(self.out / name, text)
        log.info("wrote %s", self.out / name)

    def budget(self):
        c = self.config
        if c.hetero.mode:
            _, b = build_hetero_profiles(c.hetero.mode, c.hetero.count, c.model.num_block_subnets,
                                         c.hetero.fast_speed_factor)
            return b
        return c.budget

    def profiles(self):
        c = self.config
        K = c.model.num_block_subnets
        if c.hetero.mode:
            return build_hetero_profiles(c.hetero.mode, c.hetero.count, K, c.hetero.fast_speed_factor)[0]
        return homogeneous_profiles(K)

    def fresh_model(self, seed: int) -> SubnetModel:
        c = self.config.for_seed(seed)
        model = partition_model(c.model)
        if c.lora_rank:
            model = attach_lora(model, c.lora_rank)
        return model

    def dataset(self, seed: int):
        return make_synthetic_dataset(self.config.for_seed(seed).dataset)


# --------------------------------------------------------------------------
# subcommands

def cmd_partition(run: Run) -> None:
    model = run.fresh_model(run.config.seed)
    rows = subnet_manifest(model)
    run.write("manifest.csv", _csv(("index", "subnet_id", "param_count"), rows))
    run.write("manifest.json", json.dumps(rows, indent=1) + "\n")
    save_checkpoint(model, run.out / "model.ckpt")


def cmd_score(run: Run) -> None:
    c = run.config
    ckpt = run.out / "model.ckpt"
    model = load_checkpoint(ckpt) if ckpt.exists() else run.fresh_model(c.seed)
    data = run.dataset(c.seed)
    scores = prepass_scores(model, data.micro_batches(c.train.micro_batch_size),
                            c.fwd_metric, c.bwd_metric, threads=run.threads)
    labels = [s.id.label for s in model.block_subnets()]
    run.write("scores.json", scores.to_json() + "\n")
    run.write("scores.csv", scores.to_csv(labels))


def _load_scores(run: Run) -> ScoreTable:
    path = run.out / "scores.json"
    if not path.exists():
        raise InputError(f"required input missing: {path} (run 'score' first)")
    return ScoreTable.from_json(path.read_text())


def cmd_schedule(run: Run) -> None:
    """Schedules for the first epoch's batch order, one file pair per policy."""
    c = run.config
    model = run.fresh_model(c.seed)
    K = c.model.num_block_subnets
    n_micro = c.dataset.num_samples // c.train.micro_batch_size
    scores = None
    if any(Policy(p) in (Policy.D2FT, Policy.SCALER) for p in c.policies):
        scores = _load_scores(run)
        if scores.shape != (K, n_micro):
            raise SchemaError("forward", f"score table shape {scores.shape} != ({K}, {n_micro})")
    labels = [s.id.label for s in model.block_subnets()]
    for p in c.policies:
        tc = c.train_config(p, c.seed, budget=run.budget())
        sched = PolicyScheduler(tc, K, scores)
        batches, csv_rows = [], []
        for b, ids in enumerate(epoch_order(tc, n_micro, 0)):
            table = sched.table(model, 0, b, ids, b)
            batches.append({"micro_batches": ids, "codes": table.codes.tolist()})
            csv_rows += [{"subnet_id": labels[k], "micro_batch": mb, "code": int(table.codes[k, j])}
                         for k in range(K) for j, mb in enumerate(ids)]
        run.write(f"schedule_{p}.json", json.dumps({"policy": p, "batches": batches}, indent=1) + "\n")
        run.write(f"schedule_{p}.csv", _csv(("subnet_id", "micro_batch", "code"), csv_rows))


def _load_schedules(run: Run, policy: str) -> list[ScheduleTable]:
    d = _read_json(run.out / f"schedule_{policy}.json")
    if "batches" not in d:
        raise SchemaError("batches", "missing field")
    tables = []
    for i, b in enumerate(d["batches"]):
        try:
            tables.append(ScheduleTable.from_dict(b))
        except SchemaError as exc:
            raise SchemaError(f"batches[{i}].{exc.path}", exc.message) from None
    return tables


def cmd_simulate(run: Run) -> None:
    c = run.config
    K = c.model.num_block_subnets
    n = c.train.batch_size // c.train.micro_batch_size
    profiles = run.profiles()
    caps = capacities_from_budget(run.budget(), c.cost_model, n, K)
    rows = []
    for p in c.policies:
        for b, table in enumerate(_load_schedules(run, p)):
            m = simulate_batch(table, profiles, c.cost_model, caps)
            rows.append(metrics_row(f"{p}/batch{b}", p, m))
    run.write("metrics.csv", metrics_csv(rows))
    run.write("metrics.json", metrics_json(rows) + "\n")


def cmd_train(run: Run) -> None:
    c = run.config
    summary = []
    for p in c.policies:
        for seed in c.run_seeds:
            model = run.fresh_model(seed)
            history = train(model, run.dataset(seed), c.train_config(p, seed, run.threads, run.budget()))
            last = history.rows[-1]
            log.info("%s seed %d: loss %.4f top1 %.3f", p, seed, last["loss"], last["top1"])
            run.write(f"history_{p}_s{seed}.csv", history.to_csv())
            run.write(f"history_{p}_s{seed}.json", history.to_json() + "\n")
            save_checkpoint(model, run.out / f"model_{p}_s{seed}.ckpt")
            summary.append({"method": p, "seed": seed, "final_loss": last["loss"], "final_top1": last["top1"],
                            "compute_fraction": last["compute_fraction"], "comm_fraction": last["comm_fraction"]})
    run.write("train_summary.csv", _csv(SUMMARY_FIELDS, summary))


def cmd_report(run: Run) -> None:
    summary = _read_csv(run.out / "train_summary.csv")
    metrics_path = run.out / "metrics.csv"
    sim = defaultdict(list)
    if metrics_path.exists():
        for r in _read_csv(metrics_path):
            sim[r["method"]].append(r)
    groups = defaultdict(list)
    for r in summary:
        try:
            key = (r["method"], float(r["compute_fraction"]), float(r["comm_fraction"]))
            groups[key].append((int(r["seed"]), float(r["final_loss"]), float(r["final_top1"])))
        except KeyError as exc:
            raise SchemaError(f"train_summary.csv:{exc.args[0]}", "missing column") from None
    rows = []
    for key in sorted(groups):
        method, cf, mf = key
        g = groups[key]
        s = sim.get(method, [])
        rows.append({
            "method": method, "compute_fraction": cf, "comm_fraction": mf,
            "seeds": " ".join(str(x[0]) for x in g),
            "mean_final_loss": float(np.mean([x[1] for x in g])),
            "mean_final_top1": float(np.mean([x[2] for x in g])),
            "mean_workload_variance": float(np.mean([float(x["workload_variance"]) for x in s])) if s else "",
            "mean_makespan_ms": float(np.mean([float(x["makespan_ms"]) for x in s])) if s else "",
        })
    audit = audit_settings()
    run.write("report.csv", _csv(REPORT_FIELDS, rows))
    run.write("audit.csv", _csv(("setting", "kind", "computed", "stated", "discrepancy"), audit))
    run.write("report.json", json.dumps({"rows": rows, "audit": audit}, indent=1) + "\n")
    for a in audit:
        if a["discrepancy"]:
            log.warning("stated %s %s of %.0f%% disagrees with computed %.1f%%",
                        a["setting"], a["kind"], 100 * a["stated"], 100 * a["computed"])


def cmd_run(run: Run) -> None:
    for step in (cmd_partition, cmd_score, cmd_schedule, cmd_simulate, cmd_train, cmd_report):
        log.info("step %s", step.__name__[4:])
        step(run)


COMMANDS = {
    "partition": cmd_partition, "score": cmd_score, "schedule": cmd_schedule,
    "simulate": cmd_simulate, "train": cmd_train, "report": cmd_report, "run": cmd_run,
}


HELP = {
    "partition": "write the subnet manifest and the initial checkpoint",
    "score": "run the scoring pre-pass and write score tables",
    "schedule": "write first-epoch schedule tables for every policy",
    "simulate": "cost fractions, workload variance and makespan per schedule",
    "train": "fine-tune every policy and seed, writing histories and checkpoints",
    "report": "aggregate trained runs into report.csv/json plus the settings audit",
    "run": "all of the above in order",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="d2ft", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name])
        p.add_argument("--config", required=True, help="run configuration JSON")
        p.add_argument("--out", help="output directory (default: out_dir from the config)")
        p.add_argument("--seed", type=int, help="override the run seed (and the seed list)")
        p.add_argument("--threads", type=int, default=1, help="worker threads for micro-batches")
    return parser


def resolve(args) -> Run:
    try:
        config = load_run_config(args.config)
        if args.seed is not None:
            d = config.to_dict()
            d["seed"], d["seeds"] = args.seed, [args.seed]
            config = run_config_from_dict(d)
    except (SchemaError, ConfigError) as exc:
        raise ConfigError(f"{args.config}: {exc}") from None
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return Run(config, Path(args.out or config.out_dir), args.threads)


def main(argv=None) -> int:
    level = os.environ.get("D2FT_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](resolve(args))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except D2FTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
