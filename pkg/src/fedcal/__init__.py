"""One-shot federated conformal calibration.

Agents each publish a single local order statistic; the server aggregates
them by another order statistic whose ranks are chosen from an exactly
computed coverage table, yielding distribution-free marginal coverage in a
single communication round. A locally private variant releases the local
quantiles through an exponential mechanism, and a simulator reproduces the
coverage/length behaviour of the methods at desk scale.
"""

from .conformal import (
    CalibrationResult,
    PredictionInterval,
    ScoreFunction,
    evaluate_intervals,
    fedcp_avg_calibrate,
    fedcp_qq_calibrate,
    predict_interval,
    read_score_matrix_csv,
    read_scores_csv,
    split_cp_calibrate,
    split_rank,
)
from .coverage_table import (
    CoverageTable,
    RankPair,
    TableKey,
    conditional_miscoverage_bound,
    coverage_bruteforce,
    coverage_column,
    coverage_probability,
    load_table,
    max_report_coverage,
    rank_condition_holds,
    save_table,
    select_ranks,
    select_ranks_unbalanced,
    unbalanced_coverage,
)
from .errors import (
    FedcalError,
    InfeasibleError,
    InternalError,
    InvalidArgumentError,
    ProtocolViolationError,
    ResourceLimitError,
)
from .federation import (
    ConditionalCoverageResult,
    ExperimentResult,
    ExponentialScores,
    FederationSpec,
    HeterogeneityModel,
    OutlierScores,
    Transcript,
    TranscriptRecorder,
    UniformScores,
    conditional_coverage_experiment,
    coverage_experiment,
    heterogeneity_tv_penalty,
    poisson_binomial_diagnostic,
    run_one_shot,
    substream,
    synthetic_conditional_quantile,
    synthetic_dataset,
    write_rows_csv,
)
from .order_stats import order_statistic, quantile_of_quantiles
from .privacy import (
    BinGrid,
    DpConfig,
    GammaSelection,
    fedcp2_qq_calibrate,
    private_quantile,
    private_quantile_distribution,
    rank_correction,
    select_gamma,
)

__version__ = "0.1.0"

__all__ = [
    "BinGrid",
    "CalibrationResult",
    "ConditionalCoverageResult",
    "CoverageTable",
    "DpConfig",
    "ExperimentResult",
    "ExponentialScores",
    "FedcalError",
    "FederationSpec",
    "GammaSelection",
    "HeterogeneityModel",
    "InfeasibleError",
    "InternalError",
    "InvalidArgumentError",
    "OutlierScores",
    "PredictionInterval",
    "ProtocolViolationError",
    "RankPair",
    "ResourceLimitError",
    "ScoreFunction",
    "TableKey",
    "Transcript",
    "TranscriptRecorder",
    "UniformScores",
    "conditional_coverage_experiment",
    "conditional_miscoverage_bound",
    "coverage_bruteforce",
    "coverage_column",
    "coverage_experiment",
    "coverage_probability",
    "evaluate_intervals",
    "fedcp2_qq_calibrate",
    "fedcp_avg_calibrate",
    "fedcp_qq_calibrate",
    "heterogeneity_tv_penalty",
    "load_table",
    "max_report_coverage",
    "order_statistic",
    "poisson_binomial_diagnostic",
    "predict_interval",
    "private_quantile",
    "private_quantile_distribution",
    "quantile_of_quantiles",
    "rank_condition_holds",
    "rank_correction",
    "read_score_matrix_csv",
    "read_scores_csv",
    "run_one_shot",
    "save_table",
    "select_gamma",
    "select_ranks",
    "select_ranks_unbalanced",
    "split_cp_calibrate",
    "split_rank",
    "substream",
    "synthetic_conditional_quantile",
    "synthetic_dataset",
    "unbalanced_coverage",
    "write_rows_csv",
]
