import csv
import math

import numpy as np
import pytest
from scipy.special import ndtr

from fedcal import (
    BinGrid,
    DpConfig,
    FederationSpec,
    HeterogeneityModel,
    InvalidArgumentError,
    OutlierScores,
    ProtocolViolationError,
    RankPair,
    TableKey,
    TranscriptRecorder,
    UniformScores,
    conditional_coverage_experiment,
    conditional_miscoverage_bound,
    coverage_experiment,
    fedcp2_qq_calibrate,
    fedcp_avg_calibrate,
    fedcp_qq_calibrate,
    heterogeneity_tv_penalty,
    order_statistic,
    poisson_binomial_diagnostic,
    rank_condition_holds,
    run_one_shot,
    select_ranks,
    substream,
    synthetic_conditional_quantile,
    synthetic_dataset,
    write_rows_csv,
)
from fedcal.federation import _synthetic_cdf


class TestSyntheticData:
    def test_deterministic_under_seed(self):
        x1, y1 = synthetic_dataset(500, np.random.default_rng(42))
        x2, y2 = synthetic_dataset(500, np.random.default_rng(42))
        np.testing.assert_array_equal(x1, x2)
        np.testing.assert_array_equal(y1, y2)

    def test_covariate_marginal_is_uniform(self):
        x, _ = synthetic_dataset(10_000, np.random.default_rng(0))
        assert x.min() >= 1.0 and x.max() <= 5.0
        sorted_u = np.sort((x - 1.0) / 4.0)
        grid = np.arange(1, x.size + 1) / x.size
        ks = np.max(np.maximum(np.abs(grid - sorted_u), np.abs(sorted_u - (grid - 1.0 / x.size))))
        assert ks < 0.02

    def test_mean_response_in_plausible_range(self):
        _, y = synthetic_dataset(2000, np.random.default_rng(1))
        assert 0.0 <= np.mean(y) <= 5.0

    def test_outlier_burst_frequency(self):
        count = 200_000
        _, y = synthetic_dataset(count, np.random.default_rng(7))
        observed = float(np.mean(np.abs(y) > 12.0))
        # |y| > 12 essentially requires a burst: 1% rate times the two-sided
        # gaussian tail of sd 25
        expected = 0.01 * 2.0 * (1.0 - ndtr(12.0 / 25.0))
        se = math.sqrt(expected * (1.0 - expected) / count)
        assert abs(observed - expected) <= 5 * se

    def test_outlier_free_variant_has_bounded_noise(self):
        rng = np.random.default_rng(3)
        x, y = synthetic_dataset(10_000, rng, outliers=False)
        # remaining noise is 0.03 * x * gaussian on top of a poisson count
        residual = y - np.round(y)
        assert np.max(np.abs(y - np.floor(y + 0.5))) < 1.0 + 0.15 * 6
        assert np.min(y) > -2.0


class TestSyntheticQuantiles:
    def test_inverts_the_conditional_cdf(self):
        x = np.linspace(1.0, 5.0, 9)
        for level in (0.05, 0.5, 0.95):
            q = synthetic_conditional_quantile(x, level)
            np.testing.assert_allclose(_synthetic_cdf(q, x, True), level, atol=1e-9)

    def test_monte_carlo_coverage_of_upper_quantile(self):
        count = 100_000
        x, y = synthetic_dataset(count, np.random.default_rng(11))
        q = synthetic_conditional_quantile(x, 0.95)
        observed = float(np.mean(y <= q))
        assert abs(observed - 0.95) <= 3 * math.sqrt(0.95 * 0.05 / count)

    def test_quantiles_ordered_in_level(self):
        x = np.array([2.0, 3.3])
        lo = synthetic_conditional_quantile(x, 0.05)
        hi = synthetic_conditional_quantile(x, 0.95)
        assert np.all(lo < hi)


class TestRunOneShot:
    def _agents(self, m=6, n=15, seed=2):
        return np.random.default_rng(seed).uniform(size=(m, n)).tolist()

    def test_qq_payloads_are_local_order_statistics(self):
        agents = self._agents()
        spec = FederationSpec(m=6, sizes=15, alpha=0.1, seed=0)
        result, transcript = run_one_shot(spec, agents, "fedcp_qq")
        rank = transcript.downlink["local_rank"]
        for agent_id, payload in transcript.uplinks:
            assert payload == order_statistic(agents[agent_id], rank)
        direct = fedcp_qq_calibrate(agents, 0.1)
        assert result == direct

    def test_avg_aggregate_is_mean_of_payloads(self):
        agents = self._agents()
        spec = FederationSpec(m=6, sizes=15, alpha=0.2, seed=0)
        result, transcript = run_one_shot(spec, agents, "fedcp_avg")
        assert result.q_hat == pytest.approx(float(np.mean(transcript.payloads)), rel=1e-15)
        assert result == fedcp_avg_calibrate(agents, 0.2)

    def test_private_payloads_are_grid_edges_and_match_direct_call(self):
        agents = (1.0 - np.random.default_rng(4).uniform(size=(5, 60))).tolist()
        spec = FederationSpec(m=5, sizes=60, alpha=0.1, seed=9)
        cfg = DpConfig(epsilon=5.0, grid=BinGrid.uniform(1.0, 20))
        result, transcript = run_one_shot(
            spec, agents, "fedcp2-qq", dp_config=cfg, rng=np.random.default_rng(9)
        )
        for _, payload in transcript.uplinks:
            assert payload in cfg.grid.edges[1:]
        direct = fedcp2_qq_calibrate(agents, 0.1, cfg, np.random.default_rng(9))
        assert result == direct

    def test_every_method_sends_exactly_one_message_per_agent(self):
        rng = np.random.default_rng(0)
        for _ in range(12):
            m = int(rng.integers(2, 9))
            n = int(rng.integers(12, 60))
            agents = (1.0 - rng.uniform(size=(m, n))).tolist()
            spec = FederationSpec(m=m, sizes=n, alpha=0.1, seed=1)
            for method in ("fedcp_qq", "fedcp_avg"):
                _, transcript = run_one_shot(spec, agents, method)
                assert len(transcript.uplinks) == m
                assert sorted(a for a, _ in transcript.uplinks) == list(range(m))
        cfg = DpConfig(epsilon=5.0, grid=BinGrid.uniform(1.0, 20))
        for (m, n) in [(5, 50), (10, 50), (5, 100)]:
            agents = (1.0 - rng.uniform(size=(m, n))).tolist()
            spec = FederationSpec(m=m, sizes=n, alpha=0.1, seed=1)
            _, transcript = run_one_shot(spec, agents, "fedcp2_qq", dp_config=cfg)
            assert len(transcript.uplinks) == m
            assert sorted(a for a, _ in transcript.uplinks) == list(range(m))

    def test_centralized_violates_the_protocol(self):
        spec = FederationSpec(m=2, sizes=5, alpha=0.1, seed=0)
        with pytest.raises(ProtocolViolationError):
            run_one_shot(spec, self._agents(2, 5), "centralized")

    def test_double_uplink_rejected(self):
        recorder = TranscriptRecorder(2)
        recorder.uplink(0, 1.0)
        with pytest.raises(ProtocolViolationError):
            recorder.uplink(0, 2.0)

    def test_missing_uplink_rejected(self):
        recorder = TranscriptRecorder(2)
        recorder.uplink(0, 1.0)
        with pytest.raises(ProtocolViolationError):
            recorder.finish()


class TestCoverageExperiment:
    def test_deterministic_for_fixed_spec(self):
        spec = FederationSpec(m=5, sizes=12, alpha=0.1, seed=31)
        first = coverage_experiment(spec, 20, "fedcp_qq", UniformScores(), 200)
        second = coverage_experiment(spec, 20, "fedcp_qq", UniformScores(), 200)
        assert first.rows == second.rows
        assert first.mean_coverage == second.mean_coverage

    def test_uniform_scores_hit_the_table_coverage(self):
        spec = FederationSpec(m=10, sizes=20, alpha=0.1, seed=5)
        _, expected = select_ranks(TableKey(10, 20), 0.1)
        reps = 800
        summary = coverage_experiment(spec, reps, "fedcp_qq", UniformScores(), 500)
        # per-replication coverage is an average over the test draw too, so
        # the binomial bound on reps * test_size trials is conservative
        se = math.sqrt(expected * (1 - expected) / reps)
        assert abs(summary.mean_coverage - expected) <= 3 * se

    def test_averaging_baseline_inflates_length_under_outliers(self):
        sampler = OutlierScores()
        spec = FederationSpec(m=20, sizes=20, alpha=0.1, seed=77)
        qq = coverage_experiment(spec, 50, "fedcp_qq", sampler, 200)
        avg = coverage_experiment(spec, 50, "fedcp_avg", sampler, 200)
        assert avg.mean_length > qq.mean_length

    def test_single_agent_is_more_conservative_than_collaboration(self):
        # same total sample size but no collaboration: guarantee further from target
        _, single = select_ranks(TableKey(1, 20), 0.1)
        _, federated = select_ranks(TableKey(50, 20), 0.1)
        assert single > federated

    def test_rows_export_round_trip(self, tmp_path):
        spec = FederationSpec(m=3, sizes=10, alpha=0.2, seed=0)
        summary = coverage_experiment(spec, 3, "fedcp_qq", UniformScores(), 50)
        path = tmp_path / "rows.csv"
        write_rows_csv(summary.rows, path)
        with open(path, newline="") as handle:
            rows = list(csv.DictReader(handle))
        assert len(rows) == 3
        assert rows[0]["method"] == "fedcp_qq"
        assert float(rows[1]["coverage"]) == summary.rows[1]["coverage"]


class TestConditionalCoverage:
    def test_uniform_scores_give_one_minus_threshold(self):
        spec = FederationSpec(m=4, sizes=10, alpha=0.1, seed=3)
        ranks = RankPair(9, 4)
        result = conditional_coverage_experiment(
            spec, 5, sampler=UniformScores(), ranks=ranks
        )
        for rep in range(5):
            agents = [
                UniformScores().sample(substream(3, rep, j), 10) for j in range(4)
            ]
            values = sorted(order_statistic(a, 9) for a in agents)
            assert result.alpha_p[rep] == pytest.approx(1.0 - values[3], abs=1e-15)

    def test_mean_miscoverage_at_most_alpha(self):
        spec = FederationSpec(m=10, sizes=20, alpha=0.1, seed=8)
        result = conditional_coverage_experiment(spec, 2000, sampler=UniformScores())
        se = float(np.std(result.alpha_p, ddof=1) / math.sqrt(2000))
        assert result.mean <= 0.1 + 3 * se

    def test_high_probability_bound_holds(self):
        key = TableKey(10, 20)
        ranks = RankPair(19, 10)
        assert rank_condition_holds(key, ranks, 0.1)
        spec = FederationSpec(m=10, sizes=20, alpha=0.1, seed=21)
        result = conditional_coverage_experiment(
            spec, 3000, sampler=UniformScores(), ranks=ranks
        )
        bound = conditional_miscoverage_bound(key, 0.1, 0.1)
        fraction = float(np.mean(result.alpha_p <= bound))
        assert fraction >= 0.9 - 3 * math.sqrt(0.9 * 0.1 / 3000)

    def test_sampler_without_cdf_rejected(self):
        class OpaqueSampler:
            def sample(self, rng, size):
                return rng.uniform(size=size)

        spec = FederationSpec(m=2, sizes=5, alpha=0.1, seed=0)
        with pytest.raises(InvalidArgumentError, match="cdf"):
            conditional_coverage_experiment(spec, 2, sampler=OpaqueSampler())


class TestPoissonBinomialDiagnostic:
    def test_equal_probabilities_collapse(self):
        out = poisson_binomial_diagnostic([0.3] * 8)
        assert out["exact_tv_to_binomial"] == pytest.approx(0.0, abs=1e-12)
        assert out["ehm_upper"] == pytest.approx(0.0, abs=1e-12)

    def test_two_point_extreme_case(self):
        # degenerate sum = 1 against Binomial(2, 1/2): distance exactly 1/2,
        # and the upper factor is sharp here
        out = poisson_binomial_diagnostic([0.0, 1.0])
        assert out["exact_tv_to_binomial"] == pytest.approx(0.5, abs=1e-12)
        assert out["ehm_upper"] == pytest.approx(0.5, abs=1e-12)

    def test_upper_bound_dominates_on_random_vectors(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            m = int(rng.integers(1, 13))
            p = rng.uniform(size=m)
            out = poisson_binomial_diagnostic(p)
            assert out["exact_tv_to_binomial"] <= out["ehm_upper"] + 1e-12

    def test_degenerate_mean_returns_zero_bounds(self):
        out = poisson_binomial_diagnostic([0.0, 0.0, 0.0])
        assert out == {"exact_tv_to_binomial": 0.0, "ehm_lower": 0.0, "ehm_upper": 0.0}

    def test_invalid_probabilities_rejected(self):
        with pytest.raises(InvalidArgumentError):
            poisson_binomial_diagnostic([0.5, 1.5])


class TestHeterogeneity:
    def test_identity_model_has_no_penalty(self):
        key = TableKey(6, 15)
        penalty = heterogeneity_tv_penalty(
            HeterogeneityModel.identity(6), UniformScores(), key, 13,
            np.random.default_rng(0), draws=500,
        )
        assert penalty == pytest.approx(0.0, abs=1e-12)

    def test_penalty_grows_with_location_shifts(self):
        key = TableKey(6, 15)
        rng_seed = 4
        penalties = []
        for magnitude in (0.0, 0.1, 0.25):
            shifts = [magnitude * (-1) ** j for j in range(6)]
            penalties.append(
                heterogeneity_tv_penalty(
                    HeterogeneityModel.location_shifts(shifts), UniformScores(),
                    key, 13, np.random.default_rng(rng_seed), draws=2000,
                )
            )
        assert penalties[0] < penalties[1] < penalties[2]

    def test_empirical_coverage_respects_the_penalty_bound(self):
        m, n, alpha = 10, 20, 0.1
        shifts = [0.12 * (-1) ** j for j in range(m)]
        model = HeterogeneityModel.location_shifts(shifts)
        key = TableKey(m, n)
        ranks, _ = select_ranks(key, alpha)
        penalty = heterogeneity_tv_penalty(
            model, UniformScores(), key, ranks.local_rank,
            np.random.default_rng(123), draws=6000,
        )
        spec = FederationSpec(m=m, sizes=n, alpha=alpha, seed=55)
        summary = coverage_experiment(
            spec, 600, "fedcp_qq", UniformScores(), 400, heterogeneity=model
        )
        assert summary.mean_coverage >= 1.0 - alpha - penalty - 3 * summary.coverage_se
        # and the shifts do measurably hurt a nonzero penalty
        assert penalty > 0.005
