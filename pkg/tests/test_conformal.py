import math

import numpy as np
import pytest

from fedcal import (
    CalibrationResult,
    InvalidArgumentError,
    PredictionInterval,
    ScoreFunction,
    evaluate_intervals,
    fedcp_avg_calibrate,
    fedcp_qq_calibrate,
    order_statistic,
    predict_interval,
    read_score_matrix_csv,
    read_scores_csv,
    split_cp_calibrate,
    split_rank,
)


class TestSplitCalibrate:
    def test_nineteen_scores(self):
        result = split_cp_calibrate(np.arange(1.0, 20.0), 0.1)
        assert result.q_hat == 18.0
        assert result.guaranteed_coverage == pytest.approx(0.9)

    def test_rank_overflow_gives_inf(self):
        assert split_cp_calibrate([4.0], 0.1).q_hat == math.inf

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            split_cp_calibrate([], 0.1)

    def test_monte_carlo_coverage_band(self):
        # coverage sits in [1-alpha, 1-alpha + 1/(n+1)] for continuous scores
        n, alpha, reps = 999, 0.1, 4000
        rng = np.random.default_rng(2024)
        scores = rng.uniform(size=(reps, n))
        rank = split_rank(n, alpha)
        q = np.partition(scores, rank - 1, axis=1)[:, rank - 1]
        hits = rng.uniform(size=reps) <= q
        estimate = float(np.mean(hits))
        se = math.sqrt(estimate * (1 - estimate) / reps)
        assert 0.9 - 3 * se <= estimate <= 0.9 + 1.0 / (n + 1) + 3 * se


class TestFedcpQQCalibrate:
    def test_single_agent_matches_split(self):
        rng = np.random.default_rng(1)
        scores = rng.normal(size=19)
        federated = fedcp_qq_calibrate([scores], 0.1)
        central = split_cp_calibrate(scores, 0.1)
        # with one agent the selected local rank is the split rank
        assert federated.params["local_rank"] == split_rank(19, 0.1)
        assert federated.q_hat == central.q_hat

    def test_identical_agents_send_equal_values(self):
        rng = np.random.default_rng(8)
        sample = rng.normal(size=25)
        result = fedcp_qq_calibrate([sample] * 6, 0.1)
        assert result.q_hat == order_statistic(sample, result.params["local_rank"])

    def test_guarantee_meets_request(self):
        rng = np.random.default_rng(3)
        result = fedcp_qq_calibrate(rng.normal(size=(8, 15)).tolist(), 0.2)
        assert result.guaranteed_coverage >= 0.8
        assert result.method == "fedcp_qq"

    def test_scale_equivariance(self):
        rng = np.random.default_rng(10)
        agents = rng.exponential(size=(5, 12))
        base = fedcp_qq_calibrate(agents.tolist(), 0.15)
        scaled = fedcp_qq_calibrate((3.5 * agents).tolist(), 0.15)
        assert scaled.q_hat == pytest.approx(3.5 * base.q_hat, rel=1e-15)

    def test_unbalanced_rejected(self):
        with pytest.raises(InvalidArgumentError):
            fedcp_qq_calibrate([[1.0, 2.0], [3.0]], 0.1)


class TestFedcpAvgCalibrate:
    def test_identical_agents(self):
        agents = [list(range(1, 11))] * 3
        result = fedcp_avg_calibrate(agents, 0.1)
        assert result.q_hat == 10.0  # rank ceil(11 * 0.9) = 10 for each agent
        assert result.guaranteed_coverage is None

    def test_mean_is_not_robust_to_one_outlier(self):
        agents = [[0.0] * 10, [0.0] * 9 + [100.0]]
        assert fedcp_avg_calibrate(agents, 0.1).q_hat == 50.0

    def test_rank_overflow_fails_loudly(self):
        with pytest.raises(InvalidArgumentError, match="does not exist"):
            fedcp_avg_calibrate([[1.0, 2.0, 3.0]] * 4, 0.1)

    def test_single_agent_matches_split_when_defined(self):
        rng = np.random.default_rng(4)
        scores = rng.normal(size=30)
        assert fedcp_avg_calibrate([scores], 0.2).q_hat == split_cp_calibrate(scores, 0.2).q_hat


class TestPredictInterval:
    def test_absolute_residual(self):
        sf = ScoreFunction.absolute_residual(lambda x: 5.0)
        result = CalibrationResult(q_hat=2.0, method="centralized", guaranteed_coverage=0.9)
        interval = predict_interval(0.0, result, sf)
        assert (interval.lower, interval.upper) == (3.0, 7.0)

    def test_infinite_threshold_is_vacuous(self):
        sf = ScoreFunction.absolute_residual(lambda x: 5.0)
        result = CalibrationResult(q_hat=math.inf, method="centralized", guaranteed_coverage=0.9)
        interval = predict_interval(0.0, result, sf)
        assert interval.lower == -math.inf and interval.upper == math.inf

    def test_quantile_pair(self):
        sf = ScoreFunction.cqr(lambda x: 1.0, lambda x: 4.0)
        result = CalibrationResult(q_hat=0.5, method="centralized", guaranteed_coverage=0.9)
        interval = predict_interval(0.0, result, sf)
        assert (interval.lower, interval.upper) == (0.5, 4.5)

    def test_negative_threshold_shrinks_quantile_interval(self):
        sf = ScoreFunction.cqr(lambda x: 1.0, lambda x: 4.0)
        result = CalibrationResult(q_hat=-0.25, method="centralized", guaranteed_coverage=0.9)
        interval = predict_interval(0.0, result, sf)
        assert (interval.lower, interval.upper) == (1.25, 3.75)

    def test_mismatched_score_kind_rejected(self):
        sf = ScoreFunction.absolute_residual(lambda x: 5.0)
        result = CalibrationResult(
            q_hat=1.0, method="centralized", guaranteed_coverage=0.9, params={"score_kind": "cqr"}
        )
        with pytest.raises(InvalidArgumentError):
            predict_interval(0.0, result, sf)

    def test_cqr_scores_can_be_negative(self):
        sf = ScoreFunction.cqr(lambda x: np.zeros_like(x), lambda x: np.ones_like(x))
        scores = sf.score(np.zeros(3), np.array([0.5, 1.5, -0.5]))
        np.testing.assert_allclose(scores, [-0.5, 0.5, 0.5])


class TestEvaluateIntervals:
    def test_all_inside(self):
        intervals = [PredictionInterval(0.0, 1.0)] * 4
        y = [0.0, 0.5, 1.0, 0.2]
        assert evaluate_intervals(intervals, y)["coverage"] == 1.0

    def test_half_coverage_and_mean_length(self):
        intervals = [PredictionInterval(0.0, 1.0), PredictionInterval(0.0, 2.0)]
        metrics = evaluate_intervals(intervals, [0.5, 3.0])
        assert metrics["coverage"] == 0.5
        assert metrics["mean_length"] == 1.5
        assert metrics["infinite_lengths"] == 0

    def test_infinite_interval_counted_separately(self):
        intervals = [PredictionInterval(-math.inf, math.inf), PredictionInterval(0.0, 2.0)]
        metrics = evaluate_intervals(intervals, [100.0, 1.0])
        assert metrics["coverage"] == 1.0
        assert metrics["mean_length"] == 2.0
        assert metrics["infinite_lengths"] == 1

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            evaluate_intervals([], [])

    def test_interval_order_enforced(self):
        with pytest.raises(InvalidArgumentError):
            PredictionInterval(2.0, 1.0)


class TestCsvIngestion:
    def test_single_column_with_header(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("score\n1.5\n2.5\n0.5\n")
        np.testing.assert_array_equal(read_scores_csv(path), [1.5, 2.5, 0.5])

    def test_single_column_without_header(self, tmp_path):
        path = tmp_path / "scores.csv"
        path.write_text("1.0\n2.0\n")
        np.testing.assert_array_equal(read_scores_csv(path), [1.0, 2.0])

    def test_per_agent_files(self, tmp_path):
        paths = []
        for j in range(3):
            p = tmp_path / f"agent{j}.csv"
            p.write_text(f"{j}.0\n{j}.5\n")
            paths.append(p)
        agents = read_score_matrix_csv(paths)
        assert len(agents) == 3
        np.testing.assert_array_equal(agents[1], [1.0, 1.5])

    def test_agent_column_format(self, tmp_path):
        path = tmp_path / "all.csv"
        path.write_text("agent,score\n0,1.0\n1,2.0\n0,3.0\n1,4.0\n")
        agents = read_score_matrix_csv([path])
        np.testing.assert_array_equal(agents[0], [1.0, 3.0])
        np.testing.assert_array_equal(agents[1], [2.0, 4.0])

    def test_malformed_line_reported_with_number(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1.0\nnot-a-number\n")
        with pytest.raises(InvalidArgumentError, match=":2"):
            read_scores_csv(path)

    def test_missing_agent_id_rejected(self, tmp_path):
        path = tmp_path / "gap.csv"
        path.write_text("agent,score\n0,1.0\n2,2.0\n")
        with pytest.raises(InvalidArgumentError, match="agent"):
            read_score_matrix_csv([path])
