"""Synthetic staged-rehabilitation world.

Draws the latent benefit table, simulates noisy therapist opinions, and
rolls out weekly patient episodes under a supplied treatment-selection
policy.  Everything here is a pure function of its RNG streams, so episodes
are reproducible and safe to generate in parallel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .params import SimParams
from .rng import SeedTree


@dataclass(frozen=True)
class PatientState:
    stage: int
    weeks_remaining: int


@dataclass(frozen=True)
class WeekRecord:
    """One treated week: state, the 8-treatment plan, reward, next stage.

    ``weeks_remaining`` is counted before the week elapses, so the final
    record of an episode has ``weeks_remaining >= 1``.  The reward is zero
    except on the episode's last record, where it equals the final stage.
    """

    stage: int
    weeks_remaining: int
    plan: tuple
    reward: float
    next_stage: int


@dataclass
class Trajectory:
    episode_id: int
    initial_stage: int
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def final_stage(self) -> int:
        return self.records[-1].next_stage

    @property
    def total_return(self) -> float:
        """Undiscounted episode return; equals the final stage by construction."""
        return sum(r.reward for r in self.records)


@dataclass(frozen=True)
class BenefitTable:
    """Latent per-(treatment, stage) benefits, fixed for a whole world.

    ``values[t - 1, s]`` is the benefit of treatment ``t`` at non-terminal
    stage ``s``.  Unobservable to agents; only the simulator reads it.
    """

    values: np.ndarray

    def column(self, stage: int) -> np.ndarray:
        return self.values[:, stage]


def max_weeks(stage: int, params: SimParams) -> int:
    """Treatment weeks afforded to a patient admitted at ``stage``."""
    _check_nonterminal(stage, params)
    return int(math.floor(params.weeks_multiplier * (params.terminal_stage - stage)))


def group_ranking(stage: int, params: SimParams) -> np.ndarray:
    """Per-group usefulness ranking (1 best, 3 worst) for one stage.

    Group ``stage + 1`` ranks first and its two nearest groups rank second,
    so every stage has exactly one rank-1 group and two rank-2 groups even
    at the edges.
    """
    _check_nonterminal(stage, params)
    ranks = np.full(params.n_groups, 3, dtype=np.int64)
    best = stage + 1
    if best == 1:
        near = (2, 3)
    elif best == params.n_groups:
        near = (params.n_groups - 2, params.n_groups - 1)
    else:
        near = (best - 1, best + 1)
    ranks[best - 1] = 1
    for g in near:
        ranks[g - 1] = 2
    return ranks


def treatment_ranks(stage: int, params: SimParams) -> np.ndarray:
    """Ranking of every treatment at ``stage``, via its true group."""
    return _rank_table(params)[stage]


@lru_cache(maxsize=16)
def _rank_table(params: SimParams) -> np.ndarray:
    table = np.empty((params.n_nonterminal, params.n_treatments), dtype=np.int64)
    for s in range(params.n_nonterminal):
        table[s] = np.repeat(group_ranking(s, params), params.treatments_per_group)
    table.setflags(write=False)
    return table


@lru_cache(maxsize=16)
def _perceived_tables(params: SimParams):
    """Precomputed conditional-normal coefficients per (stage, treatment).

    perceived = base + slope * benefit + sd * z with z standard normal.
    """
    ranks = _rank_table(params)
    rank_p = np.asarray(params.rank_params)
    perc_p = np.asarray(params.perceived_params)
    idx = ranks - 1
    mu_a, sd_a = rank_p[idx, 0], rank_p[idx, 1]
    rho, mu_p, sd_p = perc_p[idx, 0], perc_p[idx, 1], perc_p[idx, 2]
    slope = rho * sd_p / sd_a
    base = mu_p - slope * mu_a
    if params.literal_perceived_sd:
        # Uncalibrated audit variant: the sd sits inside the square root.
        sd = np.sqrt((1.0 - rho**2) * sd_p)
    else:
        sd = sd_p * np.sqrt(1.0 - rho**2)
    for arr in (slope, base, sd):
        arr.setflags(write=False)
    return slope, base, sd


def sample_actual_benefits(rng: np.random.Generator, params: SimParams) -> BenefitTable:
    """Draw one world's benefit table, normal by per-stage group ranking."""
    rank_p = np.asarray(params.rank_params)
    values = np.empty((params.n_treatments, params.n_nonterminal))
    for s in range(params.n_nonterminal):
        idx = treatment_ranks(s, params) - 1
        values[:, s] = rank_p[idx, 0] + rank_p[idx, 1] * rng.standard_normal(params.n_treatments)
    values.setflags(write=False)
    return BenefitTable(values)


def sample_perceived_benefits(
    rng: np.random.Generator, atb_column: np.ndarray, stage: int, params: SimParams
) -> np.ndarray:
    """One therapist's noisy opinion of every treatment at ``stage``.

    Drawn from the conditional normal given the latent benefits, with the
    per-ranking correlations and unconditional moments from the world
    parameters.
    """
    _check_nonterminal(stage, params)
    slope, base, sd = _perceived_tables(params)
    z = rng.standard_normal(params.n_treatments)
    return base[stage] + slope[stage] * np.asarray(atb_column) + sd[stage] * z


def transition_probability(aggregate_benefit: float, params: SimParams) -> float:
    """Chance of improving one stage, given the plan's summed latent benefit.

    A capped logistic: strictly increasing, and never reaching the cap so
    recovery always takes time regardless of the plan.
    """
    b = float(aggregate_benefit)
    if not math.isfinite(b):
        raise ValueError(f"aggregate benefit must be finite, got {aggregate_benefit!r}")
    if params.literal_transition_exponent:
        # Audit variant with slope and intercept exchanged in the exponent;
        # decreasing in the benefit, so it fails every calibration target.
        z = params.transition_slope - params.transition_intercept * b
    else:
        z = params.transition_slope * b - params.transition_intercept
    if z >= 0:
        return params.transition_cap / (1.0 + math.exp(-z))
    e = math.exp(z)
    return params.transition_cap * e / (1.0 + e)


def sample_initial_stage(rng: np.random.Generator, params: SimParams) -> int:
    return int(rng.choice(params.n_nonterminal, p=params.initial_stage_mass))


def step(
    state: PatientState,
    plan,
    world: BenefitTable,
    rng: np.random.Generator,
    params: SimParams,
) -> tuple[PatientState, bool]:
    """Apply one week of treatment; the stage either holds or gains one."""
    _check_nonterminal(state.stage, params)
    if state.weeks_remaining < 1:
        raise ValueError("no treatment weeks remaining")
    plan = np.asarray(plan, dtype=np.int64)
    _check_plan(plan, params)
    aggregate = float(world.values[plan - 1, state.stage].sum())
    p = transition_probability(aggregate, params)
    improved = bool(rng.random() < p)
    next_stage = state.stage + 1 if improved else state.stage
    return PatientState(next_stage, state.weeks_remaining - 1), improved


def run_episode(
    policy,
    world: BenefitTable,
    params: SimParams,
    episode_tree: SeedTree,
    episode_id: int = 0,
) -> Trajectory:
    """Simulate one patient from admission to recovery or week exhaustion.

    The policy must expose ``plan(stage, weeks_remaining, perceived, rng)``
    returning ``plan_size`` distinct treatment ids, plus a ``weekly`` flag.
    A fresh perceived-benefit vector is drawn on first entry to each stage
    and reused for repeated weeks there (one therapist's opinion is stable
    within an episode); non-``weekly`` policies are re-consulted only when
    the stage changes.
    """
    init_rng = episode_tree.child("init").generator()
    trans_rng = episode_tree.child("transition").generator()
    plan_rng = episode_tree.child("plan").generator()

    stage = sample_initial_stage(init_rng, params)
    weeks = max_weeks(stage, params)
    traj = Trajectory(episode_id=episode_id, initial_stage=stage)

    def enter_stage(s: int) -> np.ndarray:
        rng = episode_tree.child("perceived", s).generator()
        return sample_perceived_benefits(rng, world.values[:, s], s, params)

    perceived = enter_stage(stage)
    plan = None
    while True:
        if plan is None or policy.weekly:
            plan = _as_plan(policy.plan(stage, weeks, perceived, plan_rng), params)
        state, improved = step(PatientState(stage, weeks), plan, world, trans_rng, params)
        done = state.stage == params.terminal_stage or state.weeks_remaining == 0
        reward = float(state.stage) if done else 0.0
        traj.records.append(WeekRecord(stage, weeks, tuple(plan.tolist()), reward, state.stage))
        weeks = state.weeks_remaining
        if done:
            break
        if improved:
            stage = state.stage
            perceived = enter_stage(stage)
            plan = None
    return traj


def trajectory_week_probabilities(
    traj: Trajectory, world: BenefitTable, params: SimParams
) -> np.ndarray:
    """Exact per-week improvement probabilities along a trajectory."""
    out = np.empty(len(traj))
    for i, rec in enumerate(traj.records):
        ids = np.asarray(rec.plan, dtype=np.int64)
        out[i] = transition_probability(float(world.values[ids - 1, rec.stage].sum()), params)
    return out


def _as_plan(plan, params: SimParams) -> np.ndarray:
    arr = np.sort(np.asarray(plan, dtype=np.int64))
    _check_plan(arr, params)
    return arr


def _check_plan(plan: np.ndarray, params: SimParams) -> None:
    if plan.shape != (params.plan_size,):
        raise ValueError(f"plan must hold exactly {params.plan_size} treatments, got {plan.shape}")
    if len(set(plan.tolist())) != params.plan_size:
        raise ValueError("plan treatments must be distinct")
    if plan.min() < 1 or plan.max() > params.n_treatments:
        raise ValueError("plan treatment ids outside the valid range")


def _check_nonterminal(stage: int, params: SimParams) -> None:
    if not 0 <= stage < params.terminal_stage:
        raise ValueError(f"stage {stage} is terminal or out of range")
