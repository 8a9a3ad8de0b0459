"""Command-line interface.

Subcommands mirror the pipeline stages: simulate a cohort, learn a grouping,
train a value model, evaluate a policy, run the full sweep, and run the two
diagnostic suites.  Progress and results are emitted as JSON lines so runs
are easy to script against; data products land in ``--out``.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from .cohort import (SelectionStats, generate_cohort, read_cohort_csv, split_rows,
                     write_cohort_csv, write_selection_stats_json, write_split_csv)
from .experiments import (ExperimentPlan, calibrate_transition_rate, evaluate_policy,
                          run_divergence_diagnostics, run_full_sweep,
                          run_oracle_repetitions, run_ranking_oracle)
from .fqi import FqiConfig, QModel, SplitEncoder, fit_fqi, write_trace_csv
from .grouping import (GroupAssignment, build_cooccurrence, cluster_kmeans,
                       dkbg_assignment, train_glove)
from .params import SimParams, load_config, save_config
from .policies import PolicySpec, build_ssavc_table
from .reports import EvaluationReport, emit_reports
from .rng import SeedTree
from .sim import sample_actual_benefits


def _log(**fields) -> None:
    print(json.dumps(fields, sort_keys=True), file=sys.stderr, flush=True)


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_setup(args) -> tuple[SimParams, int]:
    if args.config:
        params, seed = load_config(args.config)
    else:
        params, seed = SimParams(), 0
    if args.seed is not None:
        seed = args.seed
    return params, seed


def _ensure_out(args) -> str:
    os.makedirs(args.out, exist_ok=True)
    return args.out


def _world(params: SimParams, seed: int):
    return sample_actual_benefits(SeedTree(seed).child("atb").generator(), params)


def cmd_simulate(args) -> int:
    params, seed = _load_setup(args)
    out = _ensure_out(args)
    tree = SeedTree(seed)
    world = _world(params, seed)
    spec = PolicySpec(kind=args.policy)
    policy = spec.build(params, world=world)
    cohort = generate_cohort(args.patients, policy, world, tree.child("cohort"), params,
                             world_id=f"seed-{seed}")
    path = os.path.join(out, "cohort.csv")
    write_cohort_csv(cohort, path)
    _log(event="simulate", patients=cohort.size, weeks=cohort.n_weeks, path=path)
    _emit({"cohort": path, "patients": cohort.size, "weeks": cohort.n_weeks})
    return 0


def cmd_group(args) -> int:
    params, seed = _load_setup(args)
    out = _ensure_out(args)
    if args.method == "dkbg":
        ga = dkbg_assignment(params.n_groups, params.treatments_per_group)
    else:
        cohort = read_cohort_csv(args.cohort, params)
        tree = SeedTree(seed)
        x = build_cooccurrence(cohort)
        cooc_path = os.path.join(out, "cooccurrence.csv")
        with open(cooc_path, "w", encoding="utf8") as fh:
            fh.write("i,j,count\n")
            for i, j in zip(*np.nonzero(np.triu(x, k=1))):
                fh.write(f"{i + 1},{j + 1},{format(x[i, j], '.17g')}\n")
        _log(event="cooccurrence", path=cooc_path)
        emb = train_glove(x, dim=args.embed_dim,
                          rng=tree.child("embed").generator())
        emb_path = os.path.join(out, "embedding.csv")
        with open(emb_path, "w", encoding="utf8") as fh:
            fh.write("treatment," + ",".join(f"v{d}" for d in range(emb.dim)) + "\n")
            for t, vec in enumerate(emb.vectors, start=1):
                fh.write(f"{t}," + ",".join(format(v, ".17g") for v in vec) + "\n")
        _log(event="embedding", path=emb_path, final_loss=emb.loss_history[-1])
        ga = cluster_kmeans(emb.vectors, k=params.n_groups,
                            rng=tree.child("kmeans").generator())
        ga.meta.update({"embedding_dim": args.embed_dim, "final_loss": emb.loss_history[-1]})
    path = os.path.join(out, "grouping.json")
    ga.save(path)
    _log(event="group", method=args.method, path=path)
    _emit(ga.to_dict())
    return 0


def cmd_train(args) -> int:
    params, _ = _load_setup(args)
    out = _ensure_out(args)
    cohort = read_cohort_csv(args.cohort, params)
    groups = GroupAssignment.load(args.groups) if args.groups \
        else dkbg_assignment(params.n_groups, params.treatments_per_group)
    model = fit_fqi(split_rows(cohort, groups), SplitEncoder(groups.k, params.n_stages),
                    FqiConfig(gamma=args.gamma))
    model_path = os.path.join(out, "qmodel.json")
    model.save(model_path)
    write_trace_csv(model, os.path.join(out, "qmodel_trace.csv"))
    _log(event="train", status=model.status, iterations=model.n_iterations, path=model_path)
    _emit({"status": model.status, "iterations": model.n_iterations,
           "features": model.feature_count, "aliased": int(model.aliased.sum()),
           "model": model_path})
    return 0 if model.converged else 1


def cmd_evaluate(args) -> int:
    params, seed = _load_setup(args)
    tree = SeedTree(seed)
    world = _world(params, seed)
    spec = PolicySpec(kind=args.policy, weight=args.weight)
    table = None
    stats = None
    if args.policy in ("agent", "mixed", "popular"):
        if not args.cohort:
            raise ValueError("this policy needs --cohort for selection statistics")
        cohort = read_cohort_csv(args.cohort, params)
        stats = SelectionStats.from_cohort(cohort)
    if args.policy in ("agent", "mixed"):
        if not args.model:
            raise ValueError("this policy needs --model")
        model = QModel.load(args.model)
        groups = GroupAssignment.load(args.groups) if args.groups \
            else dkbg_assignment(params.n_groups, params.treatments_per_group)
        table = build_ssavc_table(model, stats, groups, params)
    policy = spec.build(params, world=world, table=table, stats=stats)
    result = evaluate_policy(policy, world, args.patients, tree.child("eval", args.policy), params)
    _emit({
        "policy": result.policy,
        "patients": result.n_patients,
        "mean_return": result.mean_return,
        "mean_week_probability": result.mean_week_probability,
        "stage_probability": [round(p, 6) for p in result.per_stage_probability.tolist()],
    })
    return 0


def cmd_sweep(args) -> int:
    params, seed = _load_setup(args)
    out = _ensure_out(args)
    plan = ExperimentPlan(
        master_seed=seed,
        replicates=args.replicates,
        eval_patients=args.patients,
        train_sizes=tuple(args.train_sizes),
        weights=tuple(args.weights),
        agents=tuple(args.agent),
        crosssection_weight=args.crosssection_weight,
    )
    report = run_full_sweep(plan, params, progress=lambda info: _log(**info))
    report_path = os.path.join(out, "report.json")
    report.save(report_path)
    paths = emit_reports(report, out)
    _log(event="sweep-done", rows=len(report.rows), report=report_path)
    _emit({"report": report_path, "files": {k: v for k, v in sorted(paths.items())}})
    return 0


def cmd_oracle(args) -> int:
    _, seed = _load_setup(args)
    tree = SeedTree(seed)
    single = run_ranking_oracle(args.obs, tree.child("oracle"))
    payload = {
        "joint_status": single.joint_status,
        "split_status": single.split_status,
        "joint_ranking": list(single.joint_ranking),
        "split_ranking": list(single.split_ranking),
        "rankings_agree": single.rankings_agree,
        "correct": single.correct,
    }
    if args.repetitions > 1:
        payload["repetitions"] = run_oracle_repetitions(args.repetitions, args.obs, tree)
    _emit(payload)
    return 0 if single.correct else 1


def cmd_diagnose(args) -> int:
    params, seed = _load_setup(args)
    tree = SeedTree(seed)
    world = _world(params, seed)
    if args.cohort:
        cohort = read_cohort_csv(args.cohort, params)
    else:
        spec = PolicySpec(kind="pt")
        cohort = generate_cohort(args.patients, spec.build(params), world,
                                 tree.child("train"), params)
    _log(event="diagnose-start", patients=cohort.size)
    diag = run_divergence_diagnostics(cohort, params)
    _emit(diag.summary())
    return 0


def cmd_calibrate(args) -> int:
    params, seed = _load_setup(args)
    tree = SeedTree(seed)
    result = calibrate_transition_rate(args.policy, args.worlds, args.episodes,
                                        tree.child("calibrate", args.policy), params)
    _emit({
        "policy": args.policy,
        "worlds": result.n_worlds,
        "weeks": result.n_weeks,
        "mean_probability": result.mean_probability,
        "mean_week_probability": result.mean_week_probability,
        "max_probability": result.max_probability,
    })
    return 0


def cmd_report(args) -> int:
    report = EvaluationReport.load(args.report)
    out = _ensure_out(args)
    paths = emit_reports(report, out)
    _emit({k: v for k, v in sorted(paths.items())})
    return 0


def cmd_init_config(args) -> int:
    out = args.path
    save_config(out, SimParams(), args.seed if args.seed is not None else 0)
    _log(event="config-written", path=out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rehab-rl",
                                     description="staged rehabilitation RL toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--seed", type=int, default=None, help="master seed")
        p.add_argument("--config", default=None, help="JSON config with world parameters")
        if out:
            p.add_argument("--out", default="out", help="output directory")

    p = sub.add_parser("simulate", help="generate a behaviour cohort to CSV")
    common(p)
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--policy", default="pt", choices=["pt", "random", "optimal"])
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("group", help="produce a treatment grouping")
    common(p)
    p.add_argument("method", choices=["dkbg", "tebg"])
    p.add_argument("--cohort", default=None, help="cohort CSV (required for tebg)")
    p.add_argument("--embed-dim", type=int, default=10)
    p.set_defaults(func=cmd_group)

    p = sub.add_parser("train", help="fit the grouped value model on a cohort")
    common(p)
    p.add_argument("--cohort", required=True)
    p.add_argument("--groups", default=None, help="grouping JSON (default: dkbg)")
    p.add_argument("--gamma", type=float, default=1.0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate one policy on fresh patients")
    common(p, out=False)
    p.add_argument("--policy", required=True,
                   choices=["pt", "agent", "mixed", "optimal", "random", "popular"])
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--weight", type=float, default=0.0)
    p.add_argument("--model", default=None, help="qmodel JSON (agent/mixed)")
    p.add_argument("--groups", default=None)
    p.add_argument("--cohort", default=None, help="training cohort CSV for statistics")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the replicated evaluation sweep")
    common(p)
    p.add_argument("--replicates", type=int, default=100)
    p.add_argument("--patients", type=int, default=1000)
    p.add_argument("--train-sizes", type=int, nargs="+",
                   default=list(range(100, 1001, 100)))
    p.add_argument("--weights", type=float, nargs="+", default=list(range(1, 21)))
    p.add_argument("--agent", nargs="+", default=["dkbg", "tebg"],
                   choices=["dkbg", "tebg"])
    p.add_argument("--crosssection-weight", type=float, default=11.0)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle", help="split-row vs whole-plan ranking cross-check")
    common(p, out=False)
    p.add_argument("--obs", type=int, default=1000)
    p.add_argument("--repetitions", type=int, default=1)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("diagnose", help="fit the known-unstable model variants")
    common(p, out=False)
    p.add_argument("--cohort", default=None, help="cohort CSV (default: simulate one)")
    p.add_argument("--patients", type=int, default=1000)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("calibrate", help="world-averaged transition-rate check")
    common(p, out=False)
    p.add_argument("--policy", default="pt", choices=["pt", "random"])
    p.add_argument("--worlds", type=int, default=50)
    p.add_argument("--episodes", type=int, default=200)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="re-emit CSV reports from a saved sweep")
    p.add_argument("--report", required=True, help="report JSON from a sweep run")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("init-config", help="write a default configuration file")
    p.add_argument("path")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_init_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface errors as JSON, nonzero exit
        _log(event="error", error=type(exc).__name__, message=str(exc))
        return 1


if __name__ == "__main__":
    sys.exit(main())
