"""Training datasets: cohorts, the 8-way split-row transform, selection stats.

A cohort is a batch of episodes generated under one behaviour policy in one
world.  Episodes are seeded by index, so growing a cohort never perturbs the
episodes already generated and any prefix of a larger cohort is bit-identical
to the cohort generated directly at that size.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .params import SimParams
from .rng import SeedTree
from .sim import BenefitTable, Trajectory, WeekRecord, run_episode

FLOAT_FMT = ".17g"  # round-trips float64 exactly


@dataclass
class Cohort:
    trajectories: list
    params: SimParams
    policy_id: str = ""
    world_id: str = ""

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def n_weeks(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def prefix(self, n: int) -> "Cohort":
        if not 0 < n <= self.size:
            raise ValueError(f"prefix size {n} outside 1..{self.size}")
        return Cohort(self.trajectories[:n], self.params, self.policy_id, self.world_id)


@dataclass
class WeekRows:
    """Column-oriented view of a cohort's week records (one row per week)."""

    stage: np.ndarray
    weeks_remaining: np.ndarray
    plans: np.ndarray  # (n, plan_size) treatment ids
    reward: np.ndarray
    next_stage: np.ndarray

    def __len__(self) -> int:
        return len(self.stage)


@dataclass
class SplitRows:
    """Week records exploded into one row per selected action group.

    All fields except ``action_group`` repeat the source week record; the
    row order is (episode, week, ascending treatment id).
    """

    stage: np.ndarray
    weeks_remaining: np.ndarray
    action_group: np.ndarray
    reward: np.ndarray
    next_stage: np.ndarray

    def __len__(self) -> int:
        return len(self.stage)


def generate_cohort(
    n_patients: int,
    policy,
    world: BenefitTable,
    tree: SeedTree,
    params: SimParams,
    world_id: str = "",
    start_index: int = 0,
) -> Cohort:
    """Simulate ``n_patients`` episodes under ``policy``.

    Episode ``i`` draws from the stream ``tree.child("episode", i)``, which
    is what makes cohort growth prefix-stable.
    """
    if n_patients < 1:
        raise ValueError("a cohort needs at least one patient")
    trajectories = [
        run_episode(policy, world, params, tree.child("episode", i), episode_id=i)
        for i in range(start_index, start_index + n_patients)
    ]
    return Cohort(trajectories, params, policy_id=getattr(policy, "kind", ""), world_id=world_id)


def extend_cohort(
    cohort: Cohort, n_additional: int, policy, world: BenefitTable, tree: SeedTree
) -> Cohort:
    """Append freshly simulated patients, leaving existing episodes untouched."""
    extra = generate_cohort(
        n_additional, policy, world, tree, cohort.params,
        world_id=cohort.world_id, start_index=cohort.size,
    )
    return Cohort(
        cohort.trajectories + extra.trajectories, cohort.params,
        cohort.policy_id, cohort.world_id,
    )


def week_rows(cohort: Cohort) -> WeekRows:
    n = cohort.n_weeks
    m = cohort.params.plan_size
    stage = np.empty(n, dtype=np.int64)
    weeks = np.empty(n, dtype=np.int64)
    plans = np.empty((n, m), dtype=np.int64)
    reward = np.empty(n)
    nxt = np.empty(n, dtype=np.int64)
    i = 0
    for traj in cohort.trajectories:
        for rec in traj.records:
            stage[i] = rec.stage
            weeks[i] = rec.weeks_remaining
            plans[i] = rec.plan
            reward[i] = rec.reward
            nxt[i] = rec.next_stage
            i += 1
    return WeekRows(stage, weeks, plans, reward, nxt)


def split_rows(cohort: Cohort, groups) -> SplitRows:
    """Explode each week record into ``plan_size`` group-labelled rows."""
    rows = week_rows(cohort)
    m = cohort.params.plan_size
    if len(rows) and rows.plans.max() > len(groups.labels):
        raise ValueError("cohort contains treatments without a group assignment")
    labels = groups.labels[rows.plans - 1].reshape(-1) if len(rows) else np.empty(0, np.int64)
    return SplitRows(
        stage=np.repeat(rows.stage, m),
        weeks_remaining=np.repeat(rows.weeks_remaining, m),
        action_group=labels,
        reward=np.repeat(rows.reward, m),
        next_stage=np.repeat(rows.next_stage, m),
    )


@dataclass
class SelectionStats:
    """How often the behaviour policy picked each treatment at each stage."""

    counts: np.ndarray  # (n_nonterminal, n_treatments) int64
    params: SimParams = field(repr=False, default=None)

    @classmethod
    def from_cohort(cls, cohort: Cohort) -> "SelectionStats":
        p = cohort.params
        counts = np.zeros((p.n_nonterminal, p.n_treatments), dtype=np.int64)
        rows = week_rows(cohort)
        np.add.at(counts, (np.repeat(rows.stage, p.plan_size), rows.plans.reshape(-1) - 1), 1)
        return cls(counts, p)

    def group_counts(self, groups) -> np.ndarray:
        """Per-(stage, group) selection totals under a group assignment."""
        out = np.zeros((self.counts.shape[0], groups.k), dtype=np.int64)
        np.add.at(out.T, groups.labels - 1, self.counts.T)
        return out

    def proportions(self, groups) -> np.ndarray:
        """counts(s, t) / group total of t's group at s, with 0/0 = 0.

        An unseen treatment gets no credit, so it stays unrankable for the
        agent except through ties.
        """
        totals = self.group_counts(groups)[:, groups.labels - 1]
        with np.errstate(invalid="ignore", divide="ignore"):
            prop = np.where(totals > 0, self.counts / np.maximum(totals, 1), 0.0)
        return prop


def selection_proportions(cohort: Cohort, groups, stage: int, treatment: int) -> float:
    """Within-group selection share of one treatment at one stage."""
    stats = SelectionStats.from_cohort(cohort)
    return float(stats.proportions(groups)[stage, treatment - 1])


# ---------------------------------------------------------------------------
# persistence

COHORT_HEADER = ["episode_id", "week_index", "stage", "weeks_remaining"]


def write_cohort_csv(cohort: Cohort, path) -> None:
    m = cohort.params.plan_size
    header = COHORT_HEADER[:] + [f"t{i + 1}" for i in range(m)] + ["reward", "next_stage"]
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for traj in cohort.trajectories:
            for w, rec in enumerate(traj.records, start=1):
                writer.writerow(
                    [traj.episode_id, w, rec.stage, rec.weeks_remaining]
                    + list(rec.plan)
                    + [format(rec.reward, FLOAT_FMT), rec.next_stage]
                )


def read_cohort_csv(path, params: SimParams) -> Cohort:
    m = params.plan_size
    trajectories: list[Trajectory] = []
    current: Trajectory | None = None
    with open(path, newline="", encoding="utf8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        expected = COHORT_HEADER + [f"t{i + 1}" for i in range(m)] + ["reward", "next_stage"]
        if header != expected:
            raise ValueError(f"unexpected cohort header: {header}")
        for row in reader:
            ep = int(row[0])
            rec = WeekRecord(
                stage=int(row[2]),
                weeks_remaining=int(row[3]),
                plan=tuple(int(x) for x in row[4 : 4 + m]),
                reward=float(row[4 + m]),
                next_stage=int(row[5 + m]),
            )
            if current is None or current.episode_id != ep:
                current = Trajectory(episode_id=ep, initial_stage=rec.stage)
                trajectories.append(current)
            current.records.append(rec)
    return Cohort(trajectories, params)


def write_split_csv(rows: SplitRows, path) -> None:
    with open(path, "w", newline="", encoding="utf8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "weeks_remaining", "action_group", "reward", "next_stage"])
        for i in range(len(rows)):
            writer.writerow(
                [
                    rows.stage[i],
                    rows.weeks_remaining[i],
                    rows.action_group[i],
                    format(rows.reward[i], FLOAT_FMT),
                    rows.next_stage[i],
                ]
            )


def write_selection_stats_json(stats: SelectionStats, path) -> None:
    """Sparse per-stage treatment counts, keyed by stage then treatment id."""
    payload = {}
    for s in range(stats.counts.shape[0]):
        nz = np.nonzero(stats.counts[s])[0]
        payload[str(s)] = {str(t + 1): int(stats.counts[s, t]) for t in nz}
    with open(path, "w", encoding="utf8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
