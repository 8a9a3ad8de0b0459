import numpy as np
import pytest

from rehab_rl import (EvaluationReport, ExperimentPlan, OptimalPolicy, PhysioPolicy,
                      SeedTree, calibrate_transition_rate, emit_reports, evaluate_policy,
                      run_full_sweep, run_oracle_repetitions, run_ranking_oracle,
                      stage_probabilities)
from rehab_rl.experiments import TOY_SUCCESS, toy_success_probability


@pytest.fixture(scope="module")
def tiny_report(params):
    plan = ExperimentPlan(
        master_seed=404,
        replicates=2,
        eval_patients=40,
        train_sizes=(30, 60),
        weights=(1.0, 11.0),
        agents=("dkbg",),
        kmeans_restarts=20,
        embed_epochs=10,
    )
    return run_full_sweep(plan, params)


def test_evaluate_policy_deterministic(params, world, tree):
    a = evaluate_policy(PhysioPolicy(), world, 50, tree.child("ev"), params)
    b = evaluate_policy(PhysioPolicy(), world, 50, tree.child("ev"), params)
    assert a.mean_return == b.mean_return
    assert np.array_equal(a.per_stage_probability, b.per_stage_probability)
    assert 0 <= a.mean_return <= 11
    assert a.max_week_probability < params.transition_cap


def test_optimal_stage_probabilities_dominate(params, world, tree):
    pt = stage_probabilities(PhysioPolicy(), world, tree.child("sp", 0), params)
    opt = stage_probabilities(OptimalPolicy(world), world, tree.child("sp", 1), params)
    assert (opt >= pt).all()  # optimal maximizes the transition curve stage by stage
    assert (opt < params.transition_cap).all()
    assert (pt > 0).all()


def test_calibration_shapes(params):
    res = calibrate_transition_rate("pt", 3, 30, SeedTree(31).child("cal"), params)
    assert res.n_worlds == 3
    assert 0 < res.mean_probability < params.transition_cap
    assert res.max_probability < params.transition_cap
    with pytest.raises(ValueError):
        calibrate_transition_rate("optimal", 1, 5, SeedTree(31), params)


def test_toy_success_table():
    assert toy_success_probability(1, 0, 1) == 0.55
    assert toy_success_probability(0, 0, 2) == 0.30
    assert sum(TOY_SUCCESS.values()) == pytest.approx(3.40)
    # the table is exactly additive in per-action contributions
    theta = {1: 0.4, 2: 0.3, 3: 0.15}
    for (nb, nm, nw), p in TOY_SUCCESS.items():
        assert nb * theta[1] + nm * theta[2] + nw * theta[3] == pytest.approx(p)


def test_ranking_oracle_single(params):
    report = run_ranking_oracle(1000, SeedTree(32).child("oracle"))
    assert report.joint_status == "converged"
    assert report.split_status == "converged"
    assert report.rankings_agree
    assert report.joint_ranking == (1, 2, 3)
    assert report.correct


def test_oracle_repetitions_mostly_correct():
    summary = run_oracle_repetitions(20, 1000, SeedTree(33))
    assert summary["both_converged"] == 20
    assert summary["correct_and_agreeing"] >= 19


def test_plan_validation():
    with pytest.raises(ValueError):
        ExperimentPlan(replicates=0)
    with pytest.raises(ValueError):
        ExperimentPlan(train_sizes=(100, 100))
    with pytest.raises(ValueError):
        ExperimentPlan(train_sizes=())
    with pytest.raises(ValueError):
        ExperimentPlan(agents=("dkbg", "other"))
    plan = ExperimentPlan()
    assert plan.train_sizes == tuple(range(100, 1001, 100))
    assert plan.weights == tuple(range(1, 21))
    round_trip = ExperimentPlan.from_dict(plan.to_dict())
    assert round_trip == plan


def test_sweep_report_structure(tiny_report, params):
    plan = tiny_report.plan
    mixed_rows = tiny_report.select(policy="mixed")
    assert len(mixed_rows) == plan.replicates * len(plan.train_sizes) * len(plan.weights)
    agent_rows = [r for r in tiny_report.select(policy="agent")
                  if r.get("mean_return") is not None]
    assert len(agent_rows) == plan.replicates * len(plan.train_sizes)
    assert len(tiny_report.select(policy="pt")) == plan.replicates
    assert len(tiny_report.select(policy="optimal")) == plan.replicates
    assert len(tiny_report.select(policy="popular")) == plan.replicates
    for row in tiny_report.rows:
        if row.get("stage_probability") is not None:
            probs = np.asarray(row["stage_probability"])
            assert (probs >= 0).all() and (probs < params.transition_cap).all()
        if row.get("mean_return") is not None:
            assert 0 <= row["mean_return"] <= 11


def test_sweep_deterministic(tiny_report, params):
    again = run_full_sweep(tiny_report.plan, params)
    assert again.rows == tiny_report.rows


def test_report_round_trip_and_queries(tiny_report, tmp_path):
    path = tmp_path / "report.json"
    tiny_report.save(path)
    loaded = EvaluationReport.load(path)
    assert loaded.rows == tiny_report.rows
    assert loaded.plan == tiny_report.plan

    returns = tiny_report.replicate_returns(policy="mixed", agent="dkbg",
                                            train_size=60, weight=11.0)
    assert len(returns) == tiny_report.plan.replicates
    gap = tiny_report.gap_closure("dkbg")
    assert np.isfinite(gap)
    with pytest.raises(KeyError):
        tiny_report.mean_return(policy="mixed", agent="dkbg", train_size=999, weight=1.0)


def test_emit_reports_files_and_replay(tiny_report, params, tmp_path):
    out1 = tmp_path / "r1"
    paths = emit_reports(tiny_report, out1)
    expected = {"figure2_returns.csv", "table3_transitions.csv", "figure3_surface.csv",
                "figure4_crosssection.csv", "manifest.json"}
    assert set(paths) == expected

    surface = (out1 / "figure3_surface.csv").read_text().strip().splitlines()
    plan = tiny_report.plan
    assert len(surface) == 1 + len(plan.agents) * len(plan.train_sizes) * len(plan.weights)

    table3 = (out1 / "table3_transitions.csv").read_text().strip().splitlines()
    assert table3[0] == "stage,physiotherapist,dkbg"
    assert len(table3) == 1 + params.n_nonterminal

    # full replay from the manifest's seed reproduces every artifact byte
    replay = run_full_sweep(plan, params)
    out2 = tmp_path / "r2"
    emit_reports(replay, out2)
    for name in expected:
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_emit_reports_unwritable(tiny_report, tmp_path):
    target = tmp_path / "blocked"
    target.write_text("a file, not a directory")
    with pytest.raises(OSError):
        emit_reports(tiny_report, target)
