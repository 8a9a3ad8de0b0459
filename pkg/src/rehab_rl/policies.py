"""Treatment-selection policies.

All selectors return exactly ``plan_size`` distinct treatment ids, sorted
ascending, and are pure functions of their inputs (the random policy draws
from the rng it is handed).  Tie-breaking is fixed so that runs replay
exactly: ascending treatment id, except the agent which prefers the more
frequently selected treatment first.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cohort import SelectionStats
from .fqi import KIND_SPLIT, QModel
from .grouping import GroupAssignment
from .params import SimParams
from .sim import BenefitTable, max_weeks

logger = logging.getLogger(__name__)

POLICY_KINDS = ("pt", "agent", "mixed", "optimal", "random", "popular")


def standardized_group_values(q_values: np.ndarray) -> np.ndarray:
    """Centre group values and scale so the best group sits exactly at one.

    Subtracts the mean and divides by the largest deviation; an all-equal
    vector carries no preference and maps to all zeros.  Order-preserving
    otherwise, so the best group under raw values stays the best group.
    """
    q = np.asarray(q_values, dtype=float)
    dev = q - q.mean()
    top = dev.max()
    if top <= 0.0:
        return np.zeros_like(dev)
    return dev / top


@dataclass
class SsavcTable:
    """Per-(stage, treatment) standardized state-action value contributions.

    values[s, t-1] = within-group selection proportion of t at s, times the
    standardized value of t's group at s.  Bounded above by one; zero for
    never-selected treatments and for stages whose group values carry no
    preference.
    """

    values: np.ndarray
    group_q: np.ndarray
    standardized: np.ndarray
    proportions: np.ndarray
    counts: np.ndarray
    groups: GroupAssignment = field(repr=False, default=None)

    def write_csv(self, path) -> None:
        n_stages, n_treatments = self.values.shape
        with open(path, "w", encoding="utf8") as fh:
            fh.write("stage,treatment,group,proportion,standardized_group_value,ssavc\n")
            for s in range(n_stages):
                for t in range(n_treatments):
                    g = self.groups.labels[t]
                    fh.write(
                        f"{s},{t + 1},{g},{format(self.proportions[s, t], '.17g')},"
                        f"{format(self.standardized[s, g - 1], '.17g')},"
                        f"{format(self.values[s, t], '.17g')}\n"
                    )


def build_ssavc_table(
    model: QModel,
    stats: SelectionStats,
    groups: GroupAssignment,
    params: SimParams,
    raw_group_value: bool = False,
) -> SsavcTable:
    """Combine a fitted value model with behaviour selection statistics.

    Group values are evaluated at each stage's first treatment week; the
    weeks covariate shifts every group equally, so the ranking is checked to
    be weeks-invariant and a violation is logged rather than fatal.
    ``raw_group_value`` switches to the unstandardized product (an audit
    variant that loses the bounded-by-one property).
    """
    if model.kind != KIND_SPLIT or not model.converged:
        raise ValueError("agent policies need a converged grouped split-row model")
    if model.encoder.levels != groups.k:
        raise ValueError("model was fitted for a different number of groups")
    n_stages = params.n_nonterminal
    group_q = np.empty((n_stages, groups.k))
    standardized = np.empty_like(group_q)
    for s in range(n_stages):
        group_q[s] = model.q_values(s, max_weeks(s, params))
        standardized[s] = standardized_group_values(group_q[s])
    _check_weeks_invariance(model, params)
    proportions = stats.proportions(groups)
    scale = group_q if raw_group_value else standardized
    values = proportions * scale[:, groups.labels - 1]
    return SsavcTable(values, group_q, standardized, proportions, stats.counts.copy(), groups)


def _check_weeks_invariance(model: QModel, params: SimParams) -> None:
    for s in range(params.n_nonterminal):
        best = {int(model.q_values(s, w).argmax()) for w in range(1, max_weeks(s, params) + 1)}
        if len(best) > 1:
            logger.warning(
                "weeks remaining changed the best group at stage %d: %s", s, sorted(best)
            )


def ssavc(stage, q_values, stats: SelectionStats, groups: GroupAssignment) -> np.ndarray:
    """Standalone per-treatment contribution vector for one stage."""
    z = standardized_group_values(q_values)
    return stats.proportions(groups)[stage] * z[groups.labels - 1]


def _top_plan(scores: np.ndarray, plan_size: int, *tiebreak: np.ndarray) -> np.ndarray:
    ids = np.arange(1, len(scores) + 1)
    keys = (ids,) + tuple(-t for t in tiebreak) + (-scores,)
    order = np.lexsort(keys)
    return np.sort(order[:plan_size] + 1)


def select_pt(perceived: np.ndarray, plan_size: int = 8) -> np.ndarray:
    """The simulated therapist: highest perceived benefit wins."""
    return _top_plan(np.asarray(perceived, dtype=float), plan_size)


def select_agent(ssavc_vector: np.ndarray, counts, plan_size: int = 8) -> np.ndarray:
    """Highest contribution wins; ties prefer the more-selected treatment."""
    return _top_plan(np.asarray(ssavc_vector, dtype=float), plan_size,
                     np.asarray(counts, dtype=float))


def select_mixed(perceived, ssavc_vector, weight: float, plan_size: int = 8) -> np.ndarray:
    """Therapist opinion nudged by the agent: perceived + weight * SSAVC."""
    if weight < 0:
        raise ValueError("mixing weight must be non-negative")
    scores = np.asarray(perceived, dtype=float) + weight * np.asarray(ssavc_vector, dtype=float)
    return _top_plan(scores, plan_size)


def select_optimal(atb_column, plan_size: int = 8) -> np.ndarray:
    """Cheating selector: top treatments by latent benefit.

    Because the transition probability is increasing in the summed benefit,
    this maximizes it over all possible plans.
    """
    return _top_plan(np.asarray(atb_column, dtype=float), plan_size)


def select_popular(stats: SelectionStats, stage: int, plan_size: int = 8) -> np.ndarray:
    """Most frequently selected treatments at this stage in the training data."""
    counts = stats.counts[stage]
    if counts.sum() == 0:
        raise ValueError(f"no recorded selections at stage {stage}")
    return _top_plan(counts.astype(float), plan_size)


def select_random(rng: np.random.Generator, n_treatments: int = 110, plan_size: int = 8) -> np.ndarray:
    return np.sort(rng.choice(n_treatments, size=plan_size, replace=False) + 1)


# ---------------------------------------------------------------------------
# policy objects used by the episode simulator


class PhysioPolicy:
    kind = "pt"
    weekly = False

    def __init__(self, plan_size: int = 8):
        self._plan_size = plan_size

    def plan(self, stage, weeks_remaining, perceived, rng):
        return select_pt(perceived, self._plan_size)


class AgentPolicy:
    kind = "agent"
    weekly = False

    def __init__(self, table: SsavcTable, plan_size: int = 8):
        self.table = table
        self._plan_size = plan_size

    def plan(self, stage, weeks_remaining, perceived, rng):
        return select_agent(self.table.values[stage], self.table.counts[stage], self._plan_size)


class MixedPolicy:
    kind = "mixed"
    weekly = False

    def __init__(self, table: SsavcTable, weight: float, plan_size: int = 8):
        if weight < 0:
            raise ValueError("mixing weight must be non-negative")
        self.table = table
        self.weight = float(weight)
        self._plan_size = plan_size

    def plan(self, stage, weeks_remaining, perceived, rng):
        return select_mixed(perceived, self.table.values[stage], self.weight, self._plan_size)


class OptimalPolicy:
    kind = "optimal"
    weekly = False

    def __init__(self, world: BenefitTable, plan_size: int = 8):
        self.world = world
        self._plan_size = plan_size

    def plan(self, stage, weeks_remaining, perceived, rng):
        return select_optimal(self.world.values[:, stage], self._plan_size)


class PopularPolicy:
    kind = "popular"
    weekly = False

    def __init__(self, stats: SelectionStats, plan_size: int = 8):
        self.stats = stats
        self._plan_size = plan_size

    def plan(self, stage, weeks_remaining, perceived, rng):
        return select_popular(self.stats, stage, self._plan_size)


class RandomPolicy:
    kind = "random"
    weekly = True  # a fresh uniform plan every week

    def __init__(self, n_treatments: int = 110, plan_size: int = 8):
        self._n = n_treatments
        self._plan_size = plan_size

    def plan(self, stage, weeks_remaining, perceived, rng):
        return select_random(rng, self._n, self._plan_size)


@dataclass
class PolicySpec:
    """Declarative policy description, for configs and the command line."""

    kind: str
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.weight < 0:
            raise ValueError("weight must be non-negative")

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "weight": self.weight})

    def build(
        self,
        params: SimParams,
        world: BenefitTable | None = None,
        table: SsavcTable | None = None,
        stats: SelectionStats | None = None,
    ):
        m = params.plan_size
        if self.kind == "pt":
            return PhysioPolicy(m)
        if self.kind == "random":
            return RandomPolicy(params.n_treatments, m)
        if self.kind == "optimal":
            if world is None:
                raise ValueError("optimal policy needs the benefit table")
            return OptimalPolicy(world, m)
        if self.kind == "popular":
            if stats is None:
                raise ValueError("popular policy needs selection statistics")
            return PopularPolicy(stats, m)
        if table is None:
            raise ValueError(f"{self.kind} policy needs a fitted contribution table")
        if self.kind == "agent":
            return AgentPolicy(table, m)
        return MixedPolicy(table, self.weight, m)
