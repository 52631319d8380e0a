"""Preference-learning bandit toolkit: softmax policies, DPO, coverage,
optimal design, reward distillation and an experiment runner."""
from .bandit import (Instance, InstanceError, SoftmaxPolicy, UNBOUNDED, divergences, entropy,
                     load_instance, loads_instance, dumps_instance, save_instance, policy_prob, sample)
from .preference import (PreferenceDataset, RewardFunction, bt_prob, collect_dataset,
                         collect_dataset_sharded, induced_pref_prob, sigmoid)
from .coverage import (CoverageCurve, coverage_curve, coverage_ratio, local_coverage_estimate,
                       mad, mad_pair_coverage, min_softmax_over_ball, pair_coverage,
                       radius_recursion_predict, sqrt_convexity_check)
from .dpo import DpoConfig, Trajectory, dpo_loss_grad, fit_dpo, make_batch_schedule, run_offline_dpo, run_online_dpo
from .design import g_optimal_frank_wolfe, preferential_design, run_two_step_dpo
from .distill import DistillLoss, DistillLossKind, RewardModel, rd_loss, rebel_exact_tabular, run_onpolicy_rd
from .instances import balanced_codewords, easy_instance, skewed_base_instance_p1, two_coord_instance
from .harness import ExperimentSpec, RunRecord, fit_loglog_slope, report, run_experiment

__version__ = "0.1.0"
