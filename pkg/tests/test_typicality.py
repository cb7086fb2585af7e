import math

import numpy as np
import pytest

from scoped import (
    AnalyticGaussianScore,
    GmmScore,
    InputError,
    TypicalityConfig,
    coordinate_trace,
    corrupt,
    hutchinson_trace,
    score_batch,
    scoped_statistic,
    sign_factor,
    typicality_ratio,
    write_typicality_csv,
)
from scoped.seeding import STREAM_CORRUPT, derive_rng, noise_level_key
from scoped.typicality import resolve_workers


class TestHutchinson:
    def test_rademacher_exact_for_isotropic(self):
        model = AnalyticGaussianScore(np.zeros(5), 1.0)
        cfg = TypicalityConfig(num_probes=3, probe_kind="rademacher", seed=0)
        rng = derive_rng(0, 99)
        est = hutchinson_trace(model, np.ones(5), 0.0, cfg, rng)
        assert est == -5.0

    def test_gaussian_probes_match_exact_trace(self):
        rng_model = np.random.default_rng(30)
        model = GmmScore([0.2, 0.5, 0.3], rng_model.standard_normal((3, 3)),
                         [0.5, 1.0, 1.5])
        x = rng_model.standard_normal(3)
        exact = coordinate_trace(model, x, 0.0)
        cfg = TypicalityConfig(num_probes=100_000, probe_kind="gaussian", seed=0)
        est = hutchinson_trace(model, x, 0.0, cfg, derive_rng(1, 1))
        assert abs(est - exact) <= 0.02 * abs(exact)

    def test_zero_probes_rejected(self):
        with pytest.raises(InputError):
            TypicalityConfig(num_probes=0)

    def test_error_std_halves_with_4x_probes(self):
        rng_model = np.random.default_rng(31)
        model = GmmScore([0.4, 0.6], rng_model.standard_normal((2, 3)), [0.6, 1.2])
        x = rng_model.standard_normal(3)
        exact = coordinate_trace(model, x, 0.0)

        def error_std(K, repeats=300):
            cfg = TypicalityConfig(num_probes=K, probe_kind="gaussian", seed=0)
            ests = [
                hutchinson_trace(model, x, 0.0, cfg, derive_rng(2, r))
                for r in range(repeats)
            ]
            return float(np.std(np.asarray(ests) - exact))

        ratio = error_std(16) / error_std(4)
        assert 0.5 * 0.75 <= ratio <= 0.5 * 1.25


class TestTypicalityRatio:
    def test_zero_score(self):
        assert typicality_ratio(0.0, -3.0, 1e-12) == 0.0

    def test_shell_value_is_one(self):
        # Isotropic case: on the shell ||x||^2 = d sigma^2 the ratio is 1.
        d, sigma2 = 7, 1.3
        norm_sq = d * sigma2 / sigma2**2     # ||x/sigma^2||^2 on the shell
        trace = -d / sigma2
        assert typicality_ratio(norm_sq, trace, 1e-12) == pytest.approx(1.0, rel=1e-12)

    def test_monte_carlo_moments(self):
        d = 100
        model = AnalyticGaussianScore(np.zeros(d), 1.0)
        rng = np.random.default_rng(32)
        values = []
        for _ in range(2000):
            x = rng.standard_normal(d)
            s = model.evaluate(x, 0.0)
            tr = -d  # exact trace for sigma^2 = 1
            values.append(typicality_ratio(float(s @ s), tr, 1e-12))
        values = np.asarray(values)
        assert 0.97 <= values.mean() <= 1.03
        assert 0.11 <= values.std() <= 0.17

    def test_negative_curvature_passes_through(self):
        assert typicality_ratio(2.0, 1.0, 1e-12) < 0

    def test_rejects_negative_norm(self):
        with pytest.raises(InputError):
            typicality_ratio(-1.0, 1.0, 1e-12)


class TestSignFactor:
    def test_negative_sum(self):
        assert sign_factor(np.array([1.0, -2.0])) == -1

    def test_zero_ties_positive(self):
        assert sign_factor(np.zeros(3)) == 1
        assert sign_factor(np.array([1.0, -1.0])) == 1

    def test_flip_property(self):
        rng = np.random.default_rng(33)
        for _ in range(50):
            v = rng.standard_normal(6)
            if float(np.sum(v)) == 0.0:
                continue
            assert sign_factor(-v) == -sign_factor(v)


class TestScopedStatistic:
    def test_in_distribution_concentration(self, default_schedule):
        # chi^2 concentration: 95% of draws fall within 1.96*sqrt(2/d) of 1.
        d = 64
        model = AnalyticGaussianScore(np.zeros(d), 1.0, schedule=default_schedule)
        cfg = TypicalityConfig(seed=4)
        rng = np.random.default_rng(34)
        X = rng.standard_normal((400, d))
        scores, fails = score_batch(model, X, [300], default_schedule, cfg)
        assert not fails
        ratios = np.array([row[0].ratio_unsigned for row in scores])
        band = 1.96 * math.sqrt(2.0 / d)
        coverage = np.mean(np.abs(ratios - 1.0) <= band)
        assert coverage >= 0.91  # binomial slack around the 95% target

    def test_far_off_shell_scaled_input(self, default_schedule):
        d = 64
        model = AnalyticGaussianScore(np.zeros(d), 1.0, schedule=default_schedule)
        cfg = TypicalityConfig(seed=4)
        rng = np.random.default_rng(35)
        X = 5.0 * rng.standard_normal((300, d))
        for t in (1, 300):
            scores, _ = score_batch(model, X, [t], default_schedule, cfg)
            ratios = np.array([row[0].ratio_unsigned for row in scores])
            assert np.mean(ratios >= 2.0) >= 0.99

    def test_fixed_noise_bit_identical(self, default_schedule):
        model = AnalyticGaussianScore(np.zeros(3), 1.0, schedule=default_schedule)
        cfg = TypicalityConfig(noise_mode="fixed", seed=9)
        x0 = np.array([0.3, -0.4, 1.0])
        a = scoped_statistic(model, x0, 200, default_schedule, cfg, sample_index=5)
        b = scoped_statistic(model, x0, 200, default_schedule, cfg, sample_index=5)
        assert a == b

    def test_fixed_noise_shared_across_samples(self, default_schedule):
        # Fixed mode: the same corruption draw is used for every sample, so
        # identical inputs at different indices give identical records.
        model = AnalyticGaussianScore(np.zeros(3), 1.0, schedule=default_schedule)
        cfg = TypicalityConfig(noise_mode="fixed", seed=9, probe_kind="rademacher")
        x0 = np.array([0.3, -0.4, 1.0])
        a = scoped_statistic(model, x0, 200, default_schedule, cfg, sample_index=0)
        b = scoped_statistic(model, x0, 200, default_schedule, cfg, sample_index=1)
        assert a.t_value == b.t_value

    def test_fresh_noise_differs_across_samples(self, default_schedule):
        model = AnalyticGaussianScore(np.zeros(3), 1.0, schedule=default_schedule)
        cfg = TypicalityConfig(noise_mode="fresh", seed=9)
        x0 = np.array([0.3, -0.4, 1.0])
        a = scoped_statistic(model, x0, 200, default_schedule, cfg, sample_index=0)
        b = scoped_statistic(model, x0, 200, default_schedule, cfg, sample_index=1)
        assert a.t_value != b.t_value

    def test_stored_fields_consistent(self, default_schedule):
        model = AnalyticGaussianScore(np.ones(4), 0.8, schedule=default_schedule)
        cfg = TypicalityConfig(seed=2, epsilon=1e-12)
        rec = scoped_statistic(model, np.ones(4), 150, default_schedule, cfg)
        assert rec.t_value == rec.sign * rec.score_norm_sq / (rec.curvature + cfg.epsilon)
        assert rec.score_norm_sq >= 0
        assert rec.probes_used == 1
        assert rec.timestep == 150

    def test_gaussian_closed_form_exact(self, default_schedule):
        # Rademacher probes have no estimator variance on isotropic
        # Jacobians, so the unsigned ratio equals ||x_t||^2 / (d var_eff)
        # up to the epsilon stabilizer.
        d, t, seed = 16, 300, 21
        model = AnalyticGaussianScore(np.zeros(d), 1.0, schedule=default_schedule)
        cfg = TypicalityConfig(seed=seed)
        x0 = np.full(d, 0.7)
        rec = scoped_statistic(model, x0, t, default_schedule, cfg, sample_index=3)
        eps_draw = derive_rng(seed, STREAM_CORRUPT, 3, noise_level_key(t)).standard_normal(d)
        x_t = corrupt(x0, t, eps_draw, default_schedule)
        var_eff = default_schedule.alpha_bar(t) * 1.0 + default_schedule.sigma(t) ** 2
        assert rec.ratio_unsigned == pytest.approx(
            float(x_t @ x_t) / (d * var_eff), rel=1e-12
        )

    def test_convention_invariance(self, default_schedule):
        # Flipping the score convention (s -> -s, trace -> -trace) leaves the
        # ratio unchanged.
        rng = np.random.default_rng(36)
        model = GmmScore([0.5, 0.5], rng.standard_normal((2, 4)), [0.7, 1.1],
                         schedule=default_schedule)
        x = rng.standard_normal(4)
        s = model.evaluate(x, 0.4)
        tr = coordinate_trace(model, x, 0.4)
        eps = 1e-12
        internal = typicality_ratio(float(s @ s), tr, eps)
        flipped_s = -s
        flipped_trace = -tr  # trace of the Jacobian of -s
        other = float(flipped_s @ flipped_s) / (flipped_trace + eps)
        assert internal == other

    def test_continuous_sigma_level(self):
        d = 8
        model = AnalyticGaussianScore(np.zeros(d), 1.0)
        cfg = TypicalityConfig(seed=11)
        x0 = np.full(d, 0.5)
        sigma = 0.6
        rec = scoped_statistic(model, x0, sigma, None, cfg, sample_index=2)
        eps_draw = derive_rng(11, STREAM_CORRUPT, 2,
                              noise_level_key(sigma)).standard_normal(d)
        x_s = x0 + sigma * eps_draw
        assert rec.ratio_unsigned == pytest.approx(
            float(x_s @ x_s) / (d * (1.0 + sigma**2)), rel=1e-12
        )

    def test_discrete_level_requires_schedule(self):
        model = AnalyticGaussianScore(np.zeros(2), 1.0)
        with pytest.raises(InputError):
            scoped_statistic(model, np.zeros(2), 10, None, TypicalityConfig())


class TestFisherIdentity:
    @pytest.mark.parametrize("kind", ["gaussian", "gmm"])
    def test_squared_norm_matches_negative_trace_in_mean(self, kind):
        rng = np.random.default_rng(37)
        d = 6
        if kind == "gaussian":
            mean, var = rng.standard_normal(d), 1.4
            model = AnalyticGaussianScore(mean, var)
            draws = mean + math.sqrt(var) * rng.standard_normal((3000, d))
        else:
            means = 2.0 * rng.standard_normal((3, d))
            weights = np.array([0.3, 0.3, 0.4])
            variances = np.array([0.8, 1.0, 1.2])
            model = GmmScore(weights, means, variances)
            comp = rng.choice(3, size=3000, p=weights)
            draws = means[comp] + np.sqrt(variances[comp])[:, None] \
                * rng.standard_normal((3000, d))
        diffs = []
        for x in draws:
            s = model.evaluate(x, 0.0)
            tr = coordinate_trace(model, x, 0.0)
            diffs.append(float(s @ s) + tr)
        diffs = np.asarray(diffs)
        se = diffs.std() / math.sqrt(diffs.size)
        assert abs(diffs.mean()) <= 3 * se


class TestBatchScoring:
    def test_worker_count_invariance(self, default_schedule, monkeypatch):
        monkeypatch.delenv("SCOPED_THREADS", raising=False)
        rng = np.random.default_rng(38)
        model = AnalyticGaussianScore(np.zeros(5), 1.0, schedule=default_schedule)
        X = rng.standard_normal((60, 5))
        cfg = TypicalityConfig(seed=3)
        serial, _ = score_batch(model, X, [1, 300], default_schedule, cfg, n_workers=1)
        threaded, _ = score_batch(model, X, [1, 300], default_schedule, cfg, n_workers=4)
        for row_a, row_b in zip(serial, threaded):
            assert row_a == row_b

    def test_scoring_failure_recorded(self, default_schedule):
        class Broken(AnalyticGaussianScore):
            def evaluate(self, x, noise_level):
                s = super().evaluate(x, noise_level)
                if x[0] > 1.0:
                    return s * np.nan
                return s

        model = Broken(np.zeros(2), 1.0, schedule=default_schedule)
        X = np.array([[0.0, 0.0], [5.0, 0.0], [0.5, 0.5]])
        cfg = TypicalityConfig(seed=1, noise_mode="fixed")
        scores, failures = score_batch(model, X, [1], default_schedule, cfg)
        failed_rows = [i for i, row in enumerate(scores) if row[0] is None]
        assert [i for i, _ in failures] == failed_rows
        assert len(failures) >= 1

    def test_csv_columns(self, tmp_path, default_schedule):
        model = AnalyticGaussianScore(np.zeros(3), 1.0, schedule=default_schedule)
        X = np.zeros((2, 3))
        cfg = TypicalityConfig(seed=0)
        scores, _ = score_batch(model, X, [1, 200], default_schedule, cfg)
        path = tmp_path / "t.csv"
        write_typicality_csv(path, scores)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "sample_index,timestep,score_norm_sq,curvature,sign,t_value"
        assert len(lines) == 5

    def test_thread_env_caps_workers(self, monkeypatch):
        monkeypatch.setenv("SCOPED_THREADS", "2")
        assert resolve_workers(8) == 2
        assert resolve_workers(1) == 1
        monkeypatch.setenv("SCOPED_THREADS", "junk")
        with pytest.raises(InputError):
            resolve_workers(4)
