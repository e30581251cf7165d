"""Command-line entry point: build ensembles, train the scheduler, run
simulations, render comparison reports.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import boost, config as cfgmod, ensemble as ens, qsched, simrun
from .errors import ConfigError, EnboostError
from .nn import count_macs, count_params


def _write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_build_ensemble(args) -> int:
    cfg = cfgmod.load_config(args.config)
    config_dir = Path(args.config).parent
    pool_cfg = cfgmod.make_pool_config(cfg, seed=args.seed)
    base_spec = cfgmod.make_network(cfg, config_dir)
    dataset = cfgmod.make_dataset(cfg, config_dir)

    pool, _ = boost.build_pool(base_spec, dataset, pool_cfg)
    eval_x, eval_y = dataset.split("eval")
    model = ens.backfit_select(pool, pool_cfg.ensemble_size, eval_x, eval_y)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    boost.save_pool(pool, out / "pool")
    ens.save_ensemble(model, out / "ensemble.json", pool_dir="pool")
    baseline_macs = count_macs(base_spec)
    summary = {
        "baseline_macs": baseline_macs,
        "baseline_params": count_params(base_spec),
        "ensemble_total_macs": model.total_macs,
        "ensemble_size": model.size,
        "pool": [{"id": l.id, "macs": l.macs,
                  "params": count_params(l.spec),
                  "eval_accuracy": l.eval_accuracy} for l in pool],
        "selected": [l.id for l in model.learners],
        "acc_profile": model.acc_profile,
        "delta_acc": model.delta_acc,
    }
    _write_json(out / "build_summary.json", summary)
    print(f"built pool of {len(pool)} and ensemble of {model.size} "
          f"({model.total_macs} MACs vs baseline {baseline_macs}) in {out}")
    return 0


def cmd_train_scheduler(args) -> int:
    cfg = cfgmod.load_config(args.config)
    config_dir = Path(args.config).parent
    env = cfgmod.make_env(cfg, config_dir)
    model = ens.load_ensemble(Path(args.ensemble) / "ensemble.json")
    seed = cfg["scheduler"]["seed"] if args.seed is None else args.seed
    episodes = cfg["scheduler"]["episodes"] if args.episodes is None else args.episodes
    hyper = cfgmod.make_qhyper(cfg)
    if episodes == 0:
        print("warning: episodes = 0, writing an untrained all-zero table",
              file=sys.stderr)
        table, curve = qsched.QTable.zeros(model.size, hyper), []
    else:
        table, curve = qsched.train_offline(env, model, episodes, seed, hyper)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    qsched.save_qtable(table, out)
    curve_path = out.with_suffix(out.suffix + ".curve.csv")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["episode", "cumulative_reward"])
    for i, r in enumerate(curve):
        writer.writerow([i, repr(r)])
    curve_path.write_text(buf.getvalue())
    print(f"trained {episodes} episodes -> {out}")
    return 0


def _parse_policy(token, model, ensemble_dir):
    if token == "all":
        return simrun.FixedKPolicy(model.size, model.size)
    if token.startswith("fixed:"):
        try:
            k = int(token.split(":", 1)[1])
        except ValueError as exc:
            raise ConfigError(f"bad policy {token!r}") from exc
        if k < 1:
            raise ConfigError("fixed:k needs k >= 1")
        return simrun.FixedKPolicy(k, model.size)
    if token.startswith("qtable:"):
        path = token.split(":", 1)[1]
        table = qsched.load_qtable(path, expected_n=model.size)
        return simrun.QPolicy(table)
    raise ConfigError(f"unknown policy {token!r} (use all, fixed:k, qtable:PATH)")


def _run_one(sim_cfg):
    return simrun.run(sim_cfg)


def cmd_simulate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    config_dir = Path(args.config).parent
    if args.trace is not None:
        cfg["energy"]["trace"]["csv"] = str(Path(args.trace).resolve())
    env = cfgmod.make_env(cfg, config_dir)
    dataset = cfgmod.make_dataset(cfg, config_dir)
    model = ens.load_ensemble(Path(args.ensemble) / "ensemble.json")
    seed = cfg["simulation"]["seed"] if args.seed is None else args.seed
    policies = [_parse_policy(tok, model, args.ensemble) for tok in args.policy]
    baseline_policy = simrun.FixedKPolicy(model.size, model.size)

    def sim_config(policy):
        return simrun.SimConfig(env=env, ensemble=model, dataset=dataset,
                                policy=policy, seed=seed,
                                retrain_mode=cfg["simulation"]["retrain_mode"]
                                if policy.name != "all" else "off",
                                retrain_learning_rate=cfg["simulation"]["retrain_learning_rate"])

    jobs = [sim_config(baseline_policy)] + [sim_config(p) for p in policies]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            reports = list(pool.map(_run_one, jobs))
    else:
        reports = [simrun.run(c) for c in jobs]
    baseline_report, policy_reports = reports[0], reports[1:]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for policy, report in zip(policies, policy_reports):
        run_dir = out / policy.name.replace(":", "-")
        run_dir.mkdir(parents=True, exist_ok=True)
        doc = report.to_dict()
        doc["baseline_policy"] = baseline_report.policy
        doc["baseline_failure_rate"] = baseline_report.failure_rate
        doc["failure_rate_reduction_vs_baseline"] = simrun.failure_rate_reduction(
            report, baseline_report)
        _write_json(run_dir / "report.json", doc)
        (run_dir / "events.csv").write_text(simrun.events_csv(report))
        print(simrun.render_report(report, args.format, baseline=baseline_report))
    return 0


def cmd_report(args) -> int:
    rows = []
    for run_dir in args.run_dirs:
        path = Path(run_dir) / "report.json"
        if not path.exists():
            raise ConfigError(f"missing report file: {path}")
        with open(path) as f:
            doc = json.load(f)
        rows.append({
            "run": str(run_dir),
            "policy": doc["policy"],
            "mean_accuracy": doc["mean_accuracy"],
            "failure_rate": doc["failure_rate"],
            "failure_rate_reduction": doc.get("failure_rate_reduction_vs_baseline"),
        })
    rows.sort(key=lambda r: (-(r["failure_rate_reduction"] or float("-inf")),
                             r["run"]))
    fields = ["run", "policy", "mean_accuracy", "failure_rate",
              "failure_rate_reduction"]
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(fields)
        for r in rows:
            writer.writerow(["n/a" if r[k] is None else
                             (repr(r[k]) if isinstance(r[k], float) else r[k])
                             for k in fields])
        print(buf.getvalue(), end="")
    else:
        for r in rows:
            print("  ".join(f"{k}={'n/a' if r[k] is None else r[k]}" for k in fields))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="enboost")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-ensemble", help="train, prune, boost, and select")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_build_ensemble)

    p = sub.add_parser("train-scheduler", help="offline Q-learning on the energy env")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble", required=True, help="build-ensemble output dir")
    p.add_argument("--out", required=True, help="q-table file path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(func=cmd_train_scheduler)

    p = sub.add_parser("simulate", help="run policies on the harvesting device")
    p.add_argument("--config", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--policy", action="append", required=True,
                   help="all, fixed:k, or qtable:PATH (repeatable)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--trace", default=None, help="override trace CSV")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--format", choices=["text", "csv", "json"], default="text")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="comparison table across simulation runs")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except EnboostError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
