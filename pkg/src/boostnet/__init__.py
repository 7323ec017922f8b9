"""Boosted early-exit networks: training, budget calibration and evaluation."""

from boostnet.budget import (
    BudgetPolicy,
    CostProfile,
    HoldoutConfidences,
    InfeasibleBudgetError,
    adjust_thresholds_non_degrading,
    average_cost,
    calibrate_thresholds,
    solve_exit_probability,
)
from boostnet.evaluator import (
    EvaluationReport,
    ExitTrace,
    anytime_eval,
    budgeted_batch_eval,
    collect_exit_gallery,
    cost_profile_estimate,
)
from boostnet.model import (
    BoostedForwardState,
    ConfigError,
    ExitSpec,
    ModelConfig,
    boosted_combine,
    build_model,
    confidence,
    forward_all_exits,
    grad_rescale_factors,
    make_config,
)
from boostnet.trainer import (
    LossBreakdown,
    TrainingConfig,
    ValidSampleStats,
    finite_diff_gradient_check,
    joint_loss,
    train,
    valid_fraction,
)

__version__ = "0.1.0"
