"""Command line entry point: run, compare, schedbench, report."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys

from .config import RunConfig, dump_yaml, load_config
from .errors import ConfigError, InstanceTooLargeError, ModiadError
from .metrics import aupro_key
from .persist import (atomic_write, deserialize_bank, jsonl_text, report_csv_text, round_csv_text,
                      serialize_bank)
from .protocol import build_environment, run_experiment, test_report
from .scheduler import (BRUTE_FORCE_LIMIT, POLICIES, brute_force_schedule, is_feasible, random_instance,
                        read_instances, smg_schedule)
from .seeding import stream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _load(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _out_dir(args, cfg: RunConfig) -> str:
    return args.out_dir or cfg.output.dir


def _fmt(x) -> str:
    return f"{x:.4f}"


def _summary_line(label: str, report: dict, cum_uplink: int) -> str:
    parts = [f"{k}={_fmt(v)}" for k, v in report["mean"].items()]
    return f"{label}: " + " ".join(parts) + f" cum_uplink={cum_uplink}"


def _records_text(rows: list, fmt: str) -> str:
    if fmt == "jsonl":
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _report_text(report: dict, fmt: str) -> str:
    if fmt == "csv":
        return report_csv_text(report)
    rows = [{"class": c, **row} for c, row in sorted(report["classes"].items())]
    rows.append({"class": "mean", **report["mean"]})
    return _records_text(rows, "jsonl")


# --- run -------------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = _load(args)
    if args.policy:
        cfg = cfg.replace(scheduler={"policy": args.policy})
    seed = cfg.seeds.master if args.seed is None else args.seed
    fmt = args.format or cfg.output.format
    result = run_experiment(cfg, seed)
    out = _out_dir(args, cfg)
    cum = result.state.ledger.cumulative
    atomic_write(os.path.join(out, "rounds.csv"), round_csv_text(result.log, cfg.topology.classes))
    atomic_write(os.path.join(out, "rounds.jsonl"), jsonl_text(result.log))
    atomic_write(os.path.join(out, f"report.{fmt}"), _report_text(result.report, fmt))
    atomic_write(os.path.join(out, "bank.bin"), serialize_bank(result.state.bank))
    atomic_write(os.path.join(out, "config.yaml"), dump_yaml(cfg))
    print(_summary_line(f"{result.policy} seed={seed}", result.report, cum.uplink))
    return EXIT_OK


# --- compare ---------------------------------------------------------------------


def _arms(policies, lora_mode: str, cfg: RunConfig):
    lora_flags = {"on": [True], "off": [False], "both": [False, True]}.get(lora_mode, [cfg.lora.enabled])
    return [(p, flag) for p in policies for flag in lora_flags]


def cmd_compare(args) -> int:
    cfg = _load(args)
    policies = [p.strip().lower() for p in (args.policy or ",".join(["smg", "rs", "so", "bo"])).split(",") if p.strip()]
    for p in policies:
        if p not in POLICIES:
            raise ConfigError(f"unknown policy {p!r}", key="scheduler.policy")
    n_seeds = args.seeds if args.seeds is not None else cfg.seeds.repetitions
    if n_seeds < 1:
        raise ConfigError("need at least one seed", key="seeds.repetitions")
    master = cfg.seeds.master if args.seed is None else args.seed
    fmt = args.format or cfg.output.format
    arms = _arms(policies, args.lora, cfg)
    limits = list(cfg.metrics.fpr_limits)
    rows, finals = [], {}
    for i in range(n_seeds):
        seed = master + i
        for policy, lora in arms:
            label = policy + ("+lora" if lora else "")
            res = run_experiment(cfg, seed, policy=policy, lora=lora)
            cum = res.state.ledger.cumulative
            row = {"arm": label, "seed": seed, **res.report["mean"],
                   "cum_uplink": cum.uplink, "cum_downlink": cum.downlink,
                   "cum_train_param_steps": cum.train_param_steps}
            row.update({f"i_auroc_c{c}": v["i_auroc"] for c, v in sorted(res.report["classes"].items())})
            rows.append(row)
            finals[(label, seed)] = res.report["mean"]["i_auroc"]
            print(_summary_line(f"{label} seed={seed}", res.report, cum.uplink), flush=True)
    labels = list(dict.fromkeys(r["arm"] for r in rows))
    wins = {label: 0 for label in labels}
    for i in range(n_seeds):
        seed = master + i
        best = max(finals[(lab, seed)] for lab in labels)
        for lab in labels:
            if finals[(lab, seed)] == best:
                wins[lab] += 1
    summary = []
    for lab in labels:
        mine = [r for r in rows if r["arm"] == lab]
        entry = {"arm": lab, "seeds": len(mine)}
        for key in ["i_auroc"] + [aupro_key(x) for x in limits]:
            entry[key] = math.fsum(r[key] for r in mine) / len(mine)
        entry["cum_uplink"] = math.fsum(r["cum_uplink"] for r in mine) / len(mine)
        entry["wins"] = wins[lab]
        summary.append(entry)
    out = _out_dir(args, cfg)
    atomic_write(os.path.join(out, f"compare.{fmt}"), _records_text(rows, fmt))
    atomic_write(os.path.join(out, f"compare_summary.{fmt}"), _records_text(summary, fmt))
    print(f"{'arm':<12} {'i_auroc':>8} " + " ".join(f"{aupro_key(x):>10}" for x in limits) + f" {'wins':>5}")
    for e in summary:
        print(f"{e['arm']:<12} {_fmt(e['i_auroc']):>8} "
              + " ".join(f"{_fmt(e[aupro_key(x)]):>10}" for x in limits) + f" {e['wins']:>5}")
    return EXIT_OK


# --- schedbench ------------------------------------------------------------------


def bench_instances(instances, limit: int = BRUTE_FORCE_LIMIT):
    """Greedy vs exhaustive optimum per instance. Returns ``(rows, skipped_indices)``."""
    rows, skipped = [], []
    for i, inst in enumerate(instances):
        balance, budgets, weights = inst.balance, inst.budgets, inst.weights
        try:
            oracle = brute_force_schedule(inst.candidates, balance, budgets, weights, limit=limit)
        except InstanceTooLargeError:
            skipped.append(i)
            continue
        greedy = smg_schedule(inst.candidates, balance, budgets, weights)
        ratio = 1.0 if oracle.objective == 0.0 else greedy.objective / oracle.objective
        rows.append({
            "instance": i,
            "n_candidates": len(inst.candidates),
            "beta": weights.beta,
            "f_greedy": greedy.objective,
            "f_oracle": oracle.objective,
            "ratio": ratio,
            "greedy_feasible": is_feasible(greedy.selected, inst.candidates, budgets),
            "oracle_feasible": is_feasible(oracle.selected, inst.candidates, budgets),
            "exact": greedy.objective == oracle.objective,
        })
    return rows, skipped


def cmd_schedbench(args) -> int:
    if args.instances:
        try:
            with open(args.instances, encoding="utf-8") as fh:
                instances = read_instances(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read instance file: {exc}", key="instances") from exc
    else:
        seed = 0 if args.seed is None else args.seed
        instances = [random_instance(stream(seed, "schedbench", i), max_clients=args.max_clients,
                                     max_classes=args.max_classes, alpha=args.alpha, beta=args.beta)
                     for i in range(args.count)]
    rows, skipped = bench_instances(instances)
    for i in skipped:
        print(f"notice: instance {i} skipped (more than {BRUTE_FORCE_LIMIT} candidates)", file=sys.stderr)
    fmt = args.format or "csv"
    if args.out_dir:
        atomic_write(os.path.join(args.out_dir, f"schedbench.{fmt}"), _records_text(rows, fmt))
    if not rows:
        print("schedbench: 0 instances")
        return EXIT_OK
    ratios = [r["ratio"] for r in rows]
    modular = [r for r in rows if r["beta"] == 0.0]
    modular_ok = all(r["exact"] for r in modular)
    feasible = all(r["greedy_feasible"] and r["oracle_feasible"] for r in rows)
    dominated = all(r["f_greedy"] <= r["f_oracle"] + 1e-12 for r in rows)
    print(f"schedbench: {len(rows)} instances, min ratio {min(ratios):.6f}, mean ratio "
          f"{math.fsum(ratios) / len(ratios):.6f}, feasible={feasible}, oracle_dominates={dominated}, "
          f"modular_exact={modular_ok} ({len(modular)} modular)")
    return EXIT_OK if (modular_ok and feasible and dominated) else EXIT_RUNTIME


# --- report ----------------------------------------------------------------------


def cmd_report(args) -> int:
    cfg = _load(args)
    seed = cfg.seeds.master if args.seed is None else args.seed
    try:
        with open(args.bank, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read bank snapshot: {exc}", key="bank") from exc
    bank = deserialize_bank(data)
    if sorted(bank.models) != list(range(cfg.topology.classes)):
        raise ConfigError("bank classes do not match topology.classes", key="topology.classes")
    env = build_environment(cfg, seed)
    report = test_report(env, bank)
    fmt = args.format or cfg.output.format
    if args.out_dir:
        atomic_write(os.path.join(args.out_dir, f"report.{fmt}"), _report_text(report, fmt))
    else:
        sys.stdout.write(_report_text(report, fmt))
    print(_summary_line(f"report seed={seed}", report, 0).rsplit(" cum_uplink", 1)[0])
    return EXIT_OK


# --- entry -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modiad", description="Class-wise distributed anomaly detection simulator.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *, seeds=False):
        sp.add_argument("--config", help="YAML run configuration (defaults when omitted)")
        sp.add_argument("--seed", type=int, help="master seed (overrides seeds.master)")
        sp.add_argument("--out-dir", help="artifact directory (overrides output.dir)")
        sp.add_argument("--format", choices=("csv", "jsonl"), help="table format")
        if seeds:
            sp.add_argument("--seeds", type=int, help="number of seed repetitions (seed, seed+1, ...)")

    run = sub.add_parser("run", help="run one experiment and write its artifacts")
    common(run)
    run.add_argument("--policy", choices=POLICIES)
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare scheduling policies over seeds")
    common(cmp_, seeds=True)
    cmp_.add_argument("--policy", help="comma-separated policies (default smg,rs,so,bo)")
    cmp_.add_argument("--lora", choices=("config", "on", "off", "both"), default="config",
                      help="low-rank updates per arm; 'both' runs every policy with and without")
    cmp_.set_defaults(func=cmd_compare)

    sb = sub.add_parser("schedbench", help="greedy scheduler vs exhaustive optimum")
    sb.add_argument("--instances", help="JSONL instance file; random instances when omitted")
    sb.add_argument("--count", type=int, default=100)
    sb.add_argument("--seed", type=int)
    sb.add_argument("--alpha", type=float, default=0.5)
    sb.add_argument("--beta", type=float, default=0.5)
    sb.add_argument("--max-clients", type=int, default=3)
    sb.add_argument("--max-classes", type=int, default=4)
    sb.add_argument("--out-dir")
    sb.add_argument("--format", choices=("csv", "jsonl"))
    sb.set_defaults(func=cmd_schedbench)

    rep = sub.add_parser("report", help="test metrics of a saved bank snapshot")
    common(rep)
    rep.add_argument("--bank", required=True, help="bank snapshot written by 'run'")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ModiadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
