"""Staged rehabilitation simulator and offline RL toolkit."""

from .params import SimParams, load_config, save_config
from .rng import SeedTree
from .sim import (BenefitTable, PatientState, Trajectory, WeekRecord, group_ranking,
                  max_weeks, run_episode, sample_actual_benefits, sample_initial_stage,
                  sample_perceived_benefits, step, transition_probability)
from .cohort import (Cohort, SelectionStats, SplitRows, WeekRows, generate_cohort,
                     extend_cohort, selection_proportions, split_rows, week_rows)
from .grouping import (GroupAssignment, GloveEmbedding, build_cooccurrence, cluster_kmeans,
                       dkbg_assignment, identity_assignment, kmeans_best,
                       partition_agreement, tebg_assignment, train_glove, true_assignment)
from .fqi import (FqiConfig, JointActionEncoder, JointGroupEncoder, QModel, QRSolver,
                  SplitEncoder, fit_fqi, solve_least_squares)
from .policies import (AgentPolicy, MixedPolicy, OptimalPolicy, PhysioPolicy, PolicySpec,
                       PopularPolicy, RandomPolicy, SsavcTable, build_ssavc_table, ssavc,
                       select_agent, select_mixed, select_optimal, select_popular,
                       select_pt, select_random, standardized_group_values)
from .experiments import (CalibrationResult, DivergenceDiagnostics, EvalResult,
                          ExperimentPlan, RankingOracleReport, calibrate_transition_rate,
                          evaluate_policy, run_divergence_diagnostics, run_full_sweep,
                          run_oracle_repetitions, run_ranking_oracle, stage_probabilities)
from .reports import EvaluationReport, aggregate_returns, emit_reports

__version__ = "0.1.0"
