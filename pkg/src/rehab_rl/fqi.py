"""Linear state-action value learning by fitted Q iteration.

Three feature encoders share one dummy-coded layout (reference level 1 for
the action dimension, reference stage 0): the grouped split-row model with a
single action-group per row, and two joint models that encode a whole weekly
plan at once, either per action or per action group.  The joint variants are
kept as diagnostics; with realistic cohorts their bootstrap extrapolates far
outside the data and the iteration blows up.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack as _lapack
from scipy.linalg import solve_triangular

from .cohort import SplitRows, WeekRows

KIND_SPLIT = "grouped-split"
KIND_JOINT_ACTION = "joint-action"
KIND_JOINT_GROUP = "joint-group"


class _DummyLayout:
    """Shared dummy-coded column layout.

    Columns: intercept, weeks remaining, level dummies for levels 2..L,
    stage dummies for stages 1..S-2 (terminal stage never encoded), then
    level-by-stage interactions in level-major order.
    """

    def __init__(self, levels: int, n_stages: int):
        if levels < 2 or n_stages < 2:
            raise ValueError("need at least two levels and two stages")
        self.levels = levels
        self.n_stages = n_stages
        self.n_nonterminal = n_stages - 1
        self._n_stage_dummies = self.n_nonterminal - 1
        self._stage_base = 2 + (levels - 1)
        self._inter_base = self._stage_base + self._n_stage_dummies
        self.feature_count = self._inter_base + (levels - 1) * self._n_stage_dummies

    def level_col(self, level: int) -> int:
        return 2 + (level - 2)

    def stage_col(self, stage: int) -> int:
        return self._stage_base + (stage - 1)

    def inter_col(self, level: int, stage: int) -> int:
        return self._inter_base + (level - 2) * self._n_stage_dummies + (stage - 1)

    def effect_tables(self, coef: np.ndarray):
        """Unpack a coefficient vector into broadcastable effect arrays."""
        lv, st = self.levels, self.n_nonterminal
        level_eff = np.zeros(lv)
        stage_eff = np.zeros(st)
        inter = np.zeros((lv, st))
        if lv > 1:
            level_eff[1:] = coef[2 : 2 + lv - 1]
        if st > 1:
            stage_eff[1:] = coef[self._stage_base : self._stage_base + st - 1]
            inter[1:, 1:] = coef[self._inter_base :].reshape(lv - 1, st - 1)
        return float(coef[0]), float(coef[1]), level_eff, stage_eff, inter

    def _check_stage(self, stage: int) -> None:
        if not 0 <= stage < self.n_nonterminal:
            raise ValueError(f"stage {stage} is terminal or out of range")


class SplitEncoder(_DummyLayout):
    """Features for single-action-group rows (the grouped split-row model)."""

    kind = KIND_SPLIT

    def __init__(self, n_groups: int, n_stages: int):
        super().__init__(n_groups, n_stages)

    def encode(self, stage: int, action_group: int, weeks_remaining: float) -> np.ndarray:
        self._check_stage(stage)
        if not 1 <= action_group <= self.levels:
            raise ValueError(f"action group {action_group} outside 1..{self.levels}")
        x = np.zeros(self.feature_count)
        x[0] = 1.0
        x[1] = weeks_remaining
        if action_group >= 2:
            x[self.level_col(action_group)] = 1.0
        if stage >= 1:
            x[self.stage_col(stage)] = 1.0
        if action_group >= 2 and stage >= 1:
            x[self.inter_col(action_group, stage)] = 1.0
        return x

    def design_from(self, rows: SplitRows) -> np.ndarray:
        n = len(rows)
        x = np.zeros((n, self.feature_count), order="F")
        x[:, 0] = 1.0
        x[:, 1] = rows.weeks_remaining
        g, s = rows.action_group, rows.stage
        idx = np.arange(n)
        mg = g >= 2
        x[idx[mg], 2 + g[mg] - 2] = 1.0
        ms = s >= 1
        x[idx[ms], self._stage_base + s[ms] - 1] = 1.0
        mb = mg & ms
        x[idx[mb], self._inter_base + (g[mb] - 2) * self._n_stage_dummies + (s[mb] - 1)] = 1.0
        return x

    def q_values(self, coef: np.ndarray, stage: int, weeks_remaining: float) -> np.ndarray:
        """Value of every action group at (stage, weeks); zero at terminal."""
        if stage == self.n_stages - 1:
            return np.zeros(self.levels)
        self._check_stage(stage)
        b0, bw, level_eff, stage_eff, inter = self.effect_tables(coef)
        return b0 + bw * weeks_remaining + stage_eff[stage] + level_eff + inter[:, stage]

    def best_next_values(
        self, coef: np.ndarray, next_stage: np.ndarray, next_weeks: np.ndarray
    ) -> np.ndarray:
        b0, bw, level_eff, stage_eff, inter = self.effect_tables(coef)
        vmax = (level_eff[:, None] + inter).max(axis=0)
        return b0 + bw * next_weeks + stage_eff[next_stage] + vmax[next_stage]


class _JointEncoder(_DummyLayout):
    """Features for whole weekly plans, encoded as per-level selection counts."""

    kind = ""
    distinct = False

    def __init__(self, levels: int, n_stages: int, plan_size: int):
        super().__init__(levels, n_stages)
        self.plan_size = plan_size

    def design_from(self, rows: WeekRows) -> np.ndarray:
        n = len(rows)
        x = np.zeros((n, self.feature_count), order="F")
        x[:, 0] = 1.0
        x[:, 1] = rows.weeks_remaining
        ridx = np.repeat(np.arange(n), self.plan_size)
        labs = rows.plans.reshape(-1)
        s_of = rows.stage[ridx]
        keep = labs >= 2
        np.add.at(x, (ridx[keep], 2 + labs[keep] - 2), 1.0)
        ms = rows.stage >= 1
        x[np.arange(n)[ms], self._stage_base + rows.stage[ms] - 1] = 1.0
        kb = keep & (s_of >= 1)
        np.add.at(
            x,
            (ridx[kb], self._inter_base + (labs[kb] - 2) * self._n_stage_dummies + (s_of[kb] - 1)),
            1.0,
        )
        return x

    def level_contributions(self, coef: np.ndarray, stage: int) -> np.ndarray:
        """Marginal value of one selection of each level at ``stage``."""
        self._check_stage(stage)
        _, _, level_eff, _, inter = self.effect_tables(coef)
        return level_eff + inter[:, stage]

    def best_next_values(
        self, coef: np.ndarray, next_stage: np.ndarray, next_weeks: np.ndarray
    ) -> np.ndarray:
        b0, bw, level_eff, stage_eff, inter = self.effect_tables(coef)
        contrib = level_eff[:, None] + inter  # (levels, stages)
        if self.distinct:
            # Best plan of distinct levels: the plan_size largest contributions.
            top = -np.partition(-contrib, self.plan_size - 1, axis=0)[: self.plan_size]
            best = top.sum(axis=0)
        else:
            # Levels may repeat, so the best plan stacks the single best level.
            best = self.plan_size * contrib.max(axis=0)
        return b0 + bw * next_weeks + stage_eff[next_stage] + best[next_stage]


class JointActionEncoder(_JointEncoder):
    kind = KIND_JOINT_ACTION

    def __init__(self, n_actions: int, n_stages: int, plan_size: int, distinct: bool = True):
        super().__init__(n_actions, n_stages, plan_size)
        self.distinct = distinct


class JointGroupEncoder(_JointEncoder):
    kind = KIND_JOINT_GROUP
    distinct = False  # a plan can sit entirely inside one group

    def __init__(self, n_groups: int, n_stages: int, plan_size: int):
        super().__init__(n_groups, n_stages, plan_size)


def make_encoder(kind: str, levels: int, n_stages: int, plan_size: int = 0, distinct: bool = True):
    if kind == KIND_SPLIT:
        return SplitEncoder(levels, n_stages)
    if kind == KIND_JOINT_ACTION:
        return JointActionEncoder(levels, n_stages, plan_size, distinct=distinct)
    if kind == KIND_JOINT_GROUP:
        return JointGroupEncoder(levels, n_stages, plan_size)
    raise ValueError(f"unknown encoder kind {kind!r}")


class QRSolver:
    """Column-pivoted QR least squares, factored once, reusable targets.

    Columns whose pivot falls below ``rel_tol`` times the leading pivot are
    flagged aliased and their coefficients pinned to zero, mirroring how a
    regression routine drops collinear terms.  The factorisation is kept in
    reflector form, so repeated solves against new right-hand sides cost one
    orthogonal apply and one triangular solve.
    """

    def __init__(self, design: np.ndarray, rel_tol: float = 1e-10, overwrite: bool = False):
        if overwrite:
            a = np.asfortranarray(design, dtype=np.float64)
        else:
            a = np.array(design, dtype=np.float64, order="F")
        if a.ndim != 2 or a.shape[0] == 0 or a.shape[1] == 0:
            raise ValueError("design matrix must be two-dimensional and non-empty")
        self.m, self.n = a.shape
        qr, jpvt, tau, work, info = _lapack.dgeqp3(a, overwrite_a=True)
        if info != 0:
            raise RuntimeError(f"QR factorisation failed (info={info})")
        self._qr, self._tau = qr, tau
        self._jpvt = jpvt - 1  # LAPACK pivots are 1-based
        k = min(self.m, self.n)
        diag = np.abs(np.diag(qr)[:k])
        if k == 0 or diag[0] == 0.0:
            self.rank = 0
        else:
            below = diag < rel_tol * diag[0]
            self.rank = int(np.argmax(below)) if below.any() else k
        self.aliased = np.ones(self.n, dtype=bool)
        self.aliased[self._jpvt[: self.rank]] = False
        # workspace query for the orthogonal apply
        c = np.zeros((self.m, 1), order="F")
        _, wq, info = _lapack.dormqr("L", "T", qr[:, :k], tau, c, -1)
        if info != 0:
            raise RuntimeError("LAPACK workspace query failed")
        self._lwork = int(wq[0].real)

    def solve(self, targets: np.ndarray) -> np.ndarray:
        y = np.asarray(targets, dtype=np.float64)
        if y.shape != (self.m,):
            raise ValueError(f"targets must have shape ({self.m},)")
        coef = np.zeros(self.n)
        if self.rank == 0:
            return coef
        c = np.array(y.reshape(self.m, 1), order="F")
        k = min(self.m, self.n)
        cq, _, info = _lapack.dormqr("L", "T", self._qr[:, :k], self._tau, c, self._lwork,
                                     overwrite_c=True)
        if info != 0:
            raise RuntimeError(f"orthogonal apply failed (info={info})")
        z = solve_triangular(self._qr[: self.rank, : self.rank], cq[: self.rank, 0], lower=False)
        coef[self._jpvt[: self.rank]] = z
        return coef


def solve_least_squares(design: np.ndarray, targets: np.ndarray, rel_tol: float = 1e-10):
    """Minimum-residual solution with aliased columns zeroed.

    Returns ``(coefficients, aliased_mask)``.
    """
    solver = QRSolver(design, rel_tol=rel_tol)
    return solver.solve(targets), solver.aliased


@dataclass(frozen=True)
class FqiConfig:
    gamma: float = 1.0
    tol: float = 1e-4
    max_iters: int = 2000
    coef_limit: float = 1e8
    delta_limit: float = 1e4
    delta_growth_patience: int = 25

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma} outside [0, 1]")
        if self.tol <= 0:
            raise ValueError("convergence tolerance must be positive")
        if self.max_iters < 2:
            raise ValueError("need at least two iterations to check convergence")


STATUS_CONVERGED = "converged"
STATUS_DIVERGED = "diverged"
STATUS_ITERATION_CAP = "iteration-cap"


@dataclass
class QModel:
    """A fitted linear value function plus its fit diagnostics."""

    kind: str
    coefficients: np.ndarray
    aliased: np.ndarray
    status: str
    n_iterations: int
    final_delta: float
    trace: np.ndarray  # columns: iteration, max coefficient delta, coefficient norm
    encoder: object = field(repr=False, default=None)
    gamma: float = 1.0

    @property
    def feature_count(self) -> int:
        return len(self.coefficients)

    @property
    def converged(self) -> bool:
        return self.status == STATUS_CONVERGED

    def q_values(self, stage: int, weeks_remaining: float) -> np.ndarray:
        """Per-group values at a state; all zero at the terminal stage."""
        if self.kind != KIND_SPLIT:
            raise ValueError("per-group q_values are defined for the grouped split model")
        return self.encoder.q_values(self.coefficients, stage, weeks_remaining)

    def level_contributions(self, stage: int) -> np.ndarray:
        """Marginal per-level value at a stage, for ranking comparisons."""
        if self.kind == KIND_SPLIT:
            _, _, level_eff, _, inter = self.encoder.effect_tables(self.coefficients)
            return level_eff + inter[:, stage]
        return self.encoder.level_contributions(self.coefficients, stage)

    def to_dict(self) -> dict:
        enc = {
            "levels": self.encoder.levels,
            "n_stages": self.encoder.n_stages,
            "plan_size": getattr(self.encoder, "plan_size", 0),
            "distinct": bool(getattr(self.encoder, "distinct", True)),
        }
        return {
            "kind": self.kind,
            "gamma": self.gamma,
            "status": self.status,
            "n_iterations": self.n_iterations,
            "final_delta": self.final_delta,
            "coefficients": self.coefficients.tolist(),
            "aliased": np.nonzero(self.aliased)[0].tolist(),
            "encoder": enc,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def from_dict(cls, data: dict) -> "QModel":
        enc = data["encoder"]
        encoder = make_encoder(
            data["kind"], enc["levels"], enc["n_stages"], enc["plan_size"], enc["distinct"]
        )
        coef = np.asarray(data["coefficients"], dtype=float)
        aliased = np.zeros(len(coef), dtype=bool)
        aliased[data["aliased"]] = True
        return cls(
            kind=data["kind"],
            coefficients=coef,
            aliased=aliased,
            status=data["status"],
            n_iterations=int(data["n_iterations"]),
            final_delta=float(data["final_delta"]),
            trace=np.empty((0, 3)),
            encoder=encoder,
            gamma=float(data["gamma"]),
        )

    @classmethod
    def load(cls, path) -> "QModel":
        with open(path, encoding="utf8") as fh:
            return cls.from_dict(json.load(fh))


def write_trace_csv(model: QModel, path) -> None:
    with open(path, "w", encoding="utf8") as fh:
        fh.write("iteration,max_delta,coef_norm\n")
        for it, delta, norm in model.trace:
            fh.write(f"{int(it)},{format(delta, '.17g')},{format(norm, '.17g')}\n")


def _collapse_split(rows: SplitRows) -> tuple[SplitRows, np.ndarray]:
    """Merge duplicate split rows into one weighted row each.

    Least squares over the unique rows with sqrt-multiplicity weights has
    exactly the same objective as over the raw rows, because the target of
    a row is a function of (stage, group, weeks, next stage) only.  This
    shrinks the regression from tens of thousands of rows to a few thousand.
    """
    key = np.stack([rows.stage, rows.action_group, rows.weeks_remaining, rows.next_stage], axis=1)
    uniq, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    lo = np.full(len(uniq), np.inf)
    hi = np.full(len(uniq), -np.inf)
    np.minimum.at(lo, inverse, rows.reward)
    np.maximum.at(hi, inverse, rows.reward)
    if np.any(hi - lo > 0):
        raise ValueError("rewards are not a function of (stage, group, weeks, next stage)")
    merged = SplitRows(
        stage=uniq[:, 0], weeks_remaining=uniq[:, 2], action_group=uniq[:, 1],
        reward=lo, next_stage=uniq[:, 3],
    )
    return merged, np.sqrt(counts.astype(float))


def fit_fqi(rows, encoder, config: FqiConfig = FqiConfig(), terminal_stage: int | None = None) -> QModel:
    """Fitted Q iteration over logged transitions with a linear model.

    The first iteration regresses on immediate rewards.  Afterwards each
    row's target bootstraps the best next-step value unless the transition
    ends the episode (recovery, or the last remaining week); iteration stops
    once no coefficient moves by more than ``config.tol``, or when the
    divergence guards trip.  Diverging fits are returned, not raised, with
    the iteration trace retained.

    Split rows are first merged into multiplicity-weighted unique rows,
    which leaves the least-squares objective unchanged.
    """
    if len(rows) == 0:
        raise ValueError("cannot fit a value function on an empty dataset")
    if terminal_stage is None:
        terminal_stage = encoder.n_stages - 1
    bad = rows.next_stage - rows.stage
    if bad.min() < 0 or bad.max() > 1:
        raise ValueError("next stage must equal the stage or exceed it by one")

    weights = None
    if isinstance(rows, SplitRows):
        rows, weights = _collapse_split(rows)

    x = encoder.design_from(rows)
    if weights is not None:
        x *= weights[:, None]
    solver = QRSolver(x, overwrite=True)
    del x
    rewards = np.asarray(rows.reward, dtype=float)
    terminal = (rows.next_stage == terminal_stage) | (rows.weeks_remaining == 1)
    boot = ~terminal
    next_stage = rows.next_stage[boot]
    next_weeks = (rows.weeks_remaining - 1)[boot].astype(float)

    def fit_targets(y: np.ndarray) -> np.ndarray:
        return solver.solve(y if weights is None else weights * y)

    coef = fit_targets(rewards)
    trace = [(1.0, float(np.abs(coef).max(initial=0.0)), float(np.linalg.norm(coef)))]
    status = STATUS_ITERATION_CAP
    delta = trace[0][1]
    prev_delta = np.inf
    growth = 0
    it = 1
    for it in range(2, config.max_iters + 1):
        y = rewards.copy()
        if next_stage.size:
            y[boot] += config.gamma * encoder.best_next_values(coef, next_stage, next_weeks)
        new_coef = fit_targets(y)
        delta = float(np.abs(new_coef - coef).max())
        coef = new_coef
        trace.append((float(it), delta, float(np.linalg.norm(coef))))
        if not np.all(np.isfinite(coef)) or np.abs(coef).max() > config.coef_limit:
            status = STATUS_DIVERGED
            break
        if delta < config.tol:
            status = STATUS_CONVERGED
            break
        growth = growth + 1 if delta > prev_delta else 0
        if delta > config.delta_limit and growth >= config.delta_growth_patience:
            status = STATUS_DIVERGED
            break
        prev_delta = delta
    return QModel(
        kind=encoder.kind,
        coefficients=coef,
        aliased=solver.aliased,
        status=status,
        n_iterations=it,
        final_delta=delta,
        trace=np.asarray(trace),
        encoder=encoder,
        gamma=config.gamma,
    )
