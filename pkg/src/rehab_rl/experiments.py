"""End-to-end experiment orchestration.

Everything here is deterministic given the master seed: one benefit-table
realization is shared across a sweep's replicates, each replicate regrows
its training cohorts, and every evaluation draws from its own named stream.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .cohort import (Cohort, SelectionStats, SplitRows, WeekRows, generate_cohort,
                     split_rows, week_rows)
from .fqi import (FqiConfig, JointActionEncoder, JointGroupEncoder, QModel, SplitEncoder,
                  fit_fqi)
from .grouping import (GroupAssignment, dkbg_assignment, identity_assignment,
                       partition_agreement, tebg_assignment, true_assignment)
from .params import SimParams
from .policies import (AgentPolicy, MixedPolicy, OptimalPolicy, PhysioPolicy,
                       PopularPolicy, RandomPolicy, build_ssavc_table)
from .rng import SeedTree
from .sim import (BenefitTable, max_weeks, run_episode, sample_actual_benefits,
                  sample_perceived_benefits, transition_probability,
                  trajectory_week_probabilities)


@dataclass
class EvalResult:
    """Outcome of treating a batch of fresh patients with one policy."""

    policy: str
    n_patients: int
    mean_return: float
    per_stage_probability: np.ndarray
    mean_week_probability: float
    max_week_probability: float
    n_weeks: int


def stage_probabilities(policy, world: BenefitTable, tree: SeedTree, params: SimParams) -> np.ndarray:
    """Exact improvement probability of the policy's plan at every stage.

    Plans are requested at each stage's first treatment week.  Policies that
    read the therapist's opinion get one fresh draw per stage, so for those
    the result is one realization, not an average.
    """
    out = np.empty(params.n_nonterminal)
    for s in range(params.n_nonterminal):
        perceived = sample_perceived_benefits(
            tree.child("perceived", s).generator(), world.values[:, s], s, params
        )
        plan = policy.plan(s, max_weeks(s, params), perceived, tree.child("plan", s).generator())
        ids = np.asarray(plan, dtype=np.int64)
        out[s] = transition_probability(float(world.values[ids - 1, s].sum()), params)
    return out


def evaluate_policy(
    policy, world: BenefitTable, n_patients: int, tree: SeedTree, params: SimParams
) -> EvalResult:
    """Treat ``n_patients`` fresh episodes and summarize outcomes.

    The mean return is the average final stage.  Week-level transition
    probabilities are computed exactly from each treated plan rather than
    from observed jumps, which removes avoidable Monte Carlo noise.
    """
    finals = np.empty(n_patients)
    prob_sum = 0.0
    prob_max = 0.0
    n_weeks = 0
    for i in range(n_patients):
        traj = run_episode(policy, world, params, tree.child("episode", i), episode_id=i)
        finals[i] = traj.final_stage
        probs = trajectory_week_probabilities(traj, world, params)
        prob_sum += float(probs.sum())
        prob_max = max(prob_max, float(probs.max()))
        n_weeks += len(probs)
    return EvalResult(
        policy=getattr(policy, "kind", "?"),
        n_patients=n_patients,
        mean_return=float(finals.mean()),
        per_stage_probability=stage_probabilities(policy, world, tree.child("stage-probe"), params),
        mean_week_probability=prob_sum / n_weeks,
        max_week_probability=prob_max,
        n_weeks=n_weeks,
    )


@dataclass
class CalibrationResult:
    """Transition-rate calibration, averaged over fresh worlds.

    ``mean_probability`` weights each plan selection once (one per episode
    and stage entered); it is the quantity the transition curve was tuned
    against.  ``mean_week_probability`` pools treated weeks instead, which
    sits lower for non-weekly policies because a low-probability plan keeps
    its patient in the stage and so gets counted for more weeks.
    """

    mean_probability: float
    mean_week_probability: float
    max_probability: float
    n_selections: int
    n_weeks: int
    n_worlds: int


def calibrate_transition_rate(
    policy_kind: str,
    n_worlds: int,
    episodes_per_world: int,
    tree: SeedTree,
    params: SimParams,
) -> CalibrationResult:
    """Simulate fresh worlds under a baseline policy and pool transition rates.

    The simulator's design targets describe the benefit-table distribution,
    not any single realization, so every world is re-drawn here.
    """
    if policy_kind not in ("pt", "random"):
        raise ValueError(f"calibration covers pt and random policies, not {policy_kind!r}")
    sel_sum, week_sum, prob_max = 0.0, 0.0, 0.0
    n_sel, n_weeks = 0, 0
    for w in range(n_worlds):
        world = sample_actual_benefits(tree.child("atb", w).generator(), params)
        if policy_kind == "pt":
            policy = PhysioPolicy(params.plan_size)
        else:
            policy = RandomPolicy(params.n_treatments, params.plan_size)
        cohort = generate_cohort(episodes_per_world, policy, world, tree.child("cohort", w), params)
        for traj in cohort.trajectories:
            probs = trajectory_week_probabilities(traj, world, params)
            week_sum += float(probs.sum())
            prob_max = max(prob_max, float(probs.max()))
            n_weeks += len(probs)
            if policy.weekly:
                sel_sum += float(probs.sum())
                n_sel += len(probs)
            else:
                seen = set()
                for rec, p in zip(traj.records, probs):
                    if rec.stage not in seen:
                        seen.add(rec.stage)
                        sel_sum += float(p)
                        n_sel += 1
    return CalibrationResult(sel_sum / n_sel, week_sum / n_weeks, prob_max,
                             n_sel, n_weeks, n_worlds)


@dataclass(frozen=True)
class ExperimentPlan:
    """Full description of a replicated evaluation sweep."""

    master_seed: int = 0
    replicates: int = 100
    eval_patients: int = 1000
    train_sizes: tuple = tuple(range(100, 1001, 100))
    weights: tuple = tuple(range(1, 21))
    agents: tuple = ("dkbg", "tebg")
    crosssection_weight: float = 11.0
    embed_dim: int = 10
    embed_epochs: int = 50
    embed_x_max: float = 10.0
    embed_learning_rate: float = 0.05
    kmeans_restarts: int = 1000
    kmeans_max_iters: int = 1000
    include_popular: bool = True

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("need at least one replicate")
        if self.eval_patients < 1:
            raise ValueError("need at least one evaluation patient")
        sizes = tuple(self.train_sizes)
        if not sizes or any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise ValueError("training sizes must be non-empty and strictly increasing")
        if any(w < 0 for w in self.weights):
            raise ValueError("weights must be non-negative")
        for agent in self.agents:
            if agent not in ("dkbg", "tebg"):
                raise ValueError(f"unknown agent {agent!r}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key in ("train_sizes", "weights", "agents"):
            out[key] = list(out[key])
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentPlan":
        kwargs = dict(data)
        for key in ("train_sizes", "weights", "agents"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def _group_assignment_for(agent: str, sub: Cohort, plan: ExperimentPlan, rtree: SeedTree,
                          size: int, params: SimParams) -> GroupAssignment:
    if agent == "dkbg":
        return dkbg_assignment(params.n_groups, params.treatments_per_group)
    return tebg_assignment(
        sub,
        dim=plan.embed_dim,
        epochs=plan.embed_epochs,
        x_max=plan.embed_x_max,
        learning_rate=plan.embed_learning_rate,
        k=params.n_groups,
        restarts=plan.kmeans_restarts,
        max_iters=plan.kmeans_max_iters,
        embed_rng=rtree.child("embed", size).generator(),
        kmeans_rng=rtree.child("kmeans", size).generator(),
    )


def run_full_sweep(plan: ExperimentPlan, params: SimParams = SimParams(),
                   fqi_config: FqiConfig = FqiConfig(), progress=None):
    """Run the whole replicated experiment grid and collect report rows.

    One world is drawn for the entire sweep; only training data (and the
    evaluation patients) change across replicates.  Diverged fits are
    recorded as rows without evaluations rather than raised.
    """
    from .reports import EvaluationReport

    tree = SeedTree(plan.master_seed)
    world = sample_actual_benefits(tree.child("atb").generator(), params)
    truth = true_assignment(params)
    max_size = max(plan.train_sizes)
    rows: list[dict] = []

    def note(**kw):
        if progress is not None:
            progress(dict(kw))

    for rep in range(plan.replicates):
        rtree = tree.child("replicate", rep)
        cohort = generate_cohort(max_size, PhysioPolicy(params.plan_size), world,
                                 rtree.child("train"), params)
        note(event="replicate-start", replicate=rep)

        pt_eval = evaluate_policy(PhysioPolicy(params.plan_size), world, plan.eval_patients,
                                  rtree.child("eval", "pt"), params)
        rows.append(_row(rep, pt_eval))
        opt_eval = evaluate_policy(OptimalPolicy(world, params.plan_size), world,
                                   plan.eval_patients, rtree.child("eval", "optimal"), params)
        rows.append(_row(rep, opt_eval))
        if plan.include_popular:
            stats_full = SelectionStats.from_cohort(cohort)
            pop_eval = evaluate_policy(PopularPolicy(stats_full, params.plan_size), world,
                                       plan.eval_patients, rtree.child("eval", "popular"), params)
            rows.append(_row(rep, pop_eval, train_size=max_size))

        for agent in plan.agents:
            for size in plan.train_sizes:
                sub = cohort.prefix(size)
                stats = SelectionStats.from_cohort(sub)
                groups = _group_assignment_for(agent, sub, plan, rtree, size, params)
                model = fit_fqi(split_rows(sub, groups), SplitEncoder(groups.k, params.n_stages),
                                fqi_config)
                fit_meta = {
                    "fit_status": model.status,
                    "fit_iterations": model.n_iterations,
                    "aliased_count": int(model.aliased.sum()),
                }
                if agent == "tebg":
                    purity, ari = partition_agreement(groups, truth)
                    fit_meta.update({"grouping_purity": purity, "grouping_ari": ari})
                note(event="fit", replicate=rep, agent=agent, train_size=size, **fit_meta)
                if not model.converged:
                    rows.append({"replicate": rep, "policy": "agent", "agent": agent,
                                 "train_size": size, "weight": 0.0, "mean_return": None,
                                 "stage_probability": None, **fit_meta})
                    continue
                table = build_ssavc_table(model, stats, groups, params)
                agent_eval = evaluate_policy(AgentPolicy(table, params.plan_size), world,
                                             plan.eval_patients,
                                             rtree.child("eval", agent, size, "agent"), params)
                rows.append(_row(rep, agent_eval, agent=agent, train_size=size, **fit_meta))
                for weight in plan.weights:
                    mx_eval = evaluate_policy(MixedPolicy(table, weight, params.plan_size), world,
                                              plan.eval_patients,
                                              rtree.child("eval", agent, size, "mixed", int(weight)),
                                              params)
                    rows.append(_row(rep, mx_eval, agent=agent, train_size=size, weight=weight))
        note(event="replicate-done", replicate=rep)
    return EvaluationReport(plan=plan, params=params, rows=rows)


def _row(rep: int, ev: EvalResult, agent: str = "", train_size: int = 0,
         weight: float = 0.0, **meta) -> dict:
    return {
        "replicate": rep,
        "policy": ev.policy,
        "agent": agent,
        "train_size": train_size,
        "weight": float(weight),
        "mean_return": ev.mean_return,
        "stage_probability": ev.per_stage_probability.tolist(),
        "mean_week_probability": ev.mean_week_probability,
        "max_week_probability": ev.max_week_probability,
        **meta,
    }


# ---------------------------------------------------------------------------
# split-row vs joint-model ranking oracle (three actions, two stages)

# Success probability of a two-action plan by selection counts of
# (action 1, action 2, action 3); action ids are ordered best to worst.
TOY_SUCCESS = {
    (2, 0, 0): 0.80,
    (1, 1, 0): 0.70,
    (1, 0, 1): 0.55,
    (0, 2, 0): 0.60,
    (0, 1, 1): 0.45,
    (0, 0, 2): 0.30,
}


def toy_success_probability(n_best: int, n_middle: int, n_worst: int) -> float:
    return TOY_SUCCESS[(n_best, n_middle, n_worst)]


@dataclass
class RankingOracleReport:
    n_obs: int
    joint_status: str
    split_status: str
    joint_ranking: tuple
    split_ranking: tuple
    rankings_agree: bool
    correct: bool


def run_ranking_oracle(n_obs: int = 1000, tree: SeedTree | None = None,
                       fqi_config: FqiConfig = FqiConfig()) -> RankingOracleReport:
    """Cross-check split-row training against a whole-plan benchmark model.

    A two-stage world with three actions, two picked per step (repeats
    allowed), single-step episodes.  The whole-plan model converges here, so
    both routes can be fitted and their action rankings compared.
    """
    tree = tree or SeedTree(0)
    rng = tree.child("toy").generator()
    picks = rng.integers(1, 4, size=(n_obs, 2))
    counts = np.stack([(picks == a).sum(axis=1) for a in (1, 2, 3)], axis=1)
    success_p = np.array([toy_success_probability(*c) for c in counts.tolist()])
    success = rng.random(n_obs) < success_p

    stage = np.zeros(n_obs, dtype=np.int64)
    weeks = np.ones(n_obs, dtype=np.int64)
    reward = success.astype(float)
    next_stage = success.astype(np.int64)

    joint_rows = WeekRows(stage, weeks, picks, reward, next_stage)
    joint = fit_fqi(joint_rows, JointActionEncoder(3, 2, 2, distinct=False), fqi_config)

    sorted_picks = np.sort(picks, axis=1)
    srows = SplitRows(
        stage=np.repeat(stage, 2),
        weeks_remaining=np.repeat(weeks, 2),
        action_group=sorted_picks.reshape(-1),
        reward=np.repeat(reward, 2),
        next_stage=np.repeat(next_stage, 2),
    )
    split = fit_fqi(srows, SplitEncoder(3, 2), fqi_config)

    def ranking(model: QModel) -> tuple:
        scores = model.level_contributions(0)
        return tuple(int(a) + 1 for a in np.lexsort((np.arange(3), -scores)))

    joint_rank = ranking(joint)
    split_rank = ranking(split)
    agree = joint_rank == split_rank and joint.converged and split.converged
    return RankingOracleReport(
        n_obs=n_obs,
        joint_status=joint.status,
        split_status=split.status,
        joint_ranking=joint_rank,
        split_ranking=split_rank,
        rankings_agree=joint_rank == split_rank,
        correct=agree and joint_rank == (1, 2, 3),
    )


def run_oracle_repetitions(n_reps: int = 100, n_obs: int = 1000,
                           tree: SeedTree | None = None) -> dict:
    """Repeat the ranking oracle under fresh seeds and tally agreement."""
    tree = tree or SeedTree(0)
    n_correct = 0
    n_converged = 0
    for rep in range(n_reps):
        report = run_ranking_oracle(n_obs, tree.child("oracle-rep", rep))
        if report.joint_status == "converged" and report.split_status == "converged":
            n_converged += 1
        if report.correct:
            n_correct += 1
    return {"repetitions": n_reps, "n_obs": n_obs,
            "both_converged": n_converged, "correct_and_agreeing": n_correct}


# ---------------------------------------------------------------------------
# divergence diagnostics for the whole-plan and ungrouped variants


@dataclass
class DivergenceDiagnostics:
    joint_action: QModel = field(repr=False, default=None)
    joint_group: QModel = field(repr=False, default=None)
    split_ungrouped: QModel = field(repr=False, default=None)
    stage10_max_q: float = float("nan")

    def summary(self) -> dict:
        def info(model: QModel) -> dict:
            return {
                "status": model.status,
                "feature_count": model.feature_count,
                "aliased_count": int(model.aliased.sum()),
                "iterations": model.n_iterations,
            }

        return {
            "joint_action": info(self.joint_action),
            "joint_group": info(self.joint_group),
            "split_ungrouped": {**info(self.split_ungrouped),
                                "last_stage_max_q": self.stage10_max_q},
        }


def run_divergence_diagnostics(cohort: Cohort, params: SimParams,
                               fqi_config: FqiConfig = FqiConfig()) -> DivergenceDiagnostics:
    """Fit the instructive failure modes on a behaviour cohort.

    The whole-plan models bootstrap their maxima far outside the logged
    plans and typically blow up; the ungrouped split-row model converges
    but inflates late-stage values beyond the achievable return.
    """
    rows = week_rows(cohort)
    groups = dkbg_assignment(params.n_groups, params.treatments_per_group)

    joint_action = fit_fqi(
        rows, JointActionEncoder(params.n_treatments, params.n_stages, params.plan_size),
        fqi_config,
    )
    grouped = WeekRows(rows.stage, rows.weeks_remaining, groups.labels[rows.plans - 1],
                       rows.reward, rows.next_stage)
    joint_group = fit_fqi(
        grouped, JointGroupEncoder(params.n_groups, params.n_stages, params.plan_size),
        fqi_config,
    )
    ungrouped = fit_fqi(
        split_rows(cohort, identity_assignment(params.n_treatments)),
        SplitEncoder(params.n_treatments, params.n_stages),
        fqi_config,
    )
    last = params.n_nonterminal - 1
    max_q = float(ungrouped.q_values(last, max_weeks(last, params)).max())
    return DivergenceDiagnostics(joint_action, joint_group, ungrouped, max_q)
