import numpy as np
import pytest
from scipy import stats

from nskernel import simulate
from nskernel.errors import ConfigurationError, DominationError
from nskernel.model import EventSequence
from nskernel.simulate import (DATASET_PRESETS, KERNEL_IDS, SimConfig, TrueKernel, TrueModel, generate_dataset,
                               pilot_lam_bar, sequence_seeds, thinning_sample, true_kernel_eval)


def constant(rate):
    return lambda t, s, ht, hs: rate


class TestTrueKernels:
    def test_exponential(self):
        k = TrueKernel("1d-exp")
        np.testing.assert_allclose(k(0.0, 0.0), 0.8)
        np.testing.assert_allclose(k(1.0, 3.0), 0.8 * np.exp(-2.0))

    def test_nonstationary(self):
        k = TrueKernel("1d-nonstat")
        np.testing.assert_allclose(k(0.0, 0.0), 0.3)
        np.testing.assert_allclose(k(5 * np.pi, 5 * np.pi + 1), 0.0, atol=1e-15)

    def test_infinite_rank_partial_sum(self):
        k = TrueKernel("1d-infrank", J=20)
        np.testing.assert_allclose(k(0.0, 0.0), 0.3 * (1 - 2.0 ** -20) * (0.3 + np.cos(2.0)), rtol=1e-12)

    def test_infinite_rank_truncation_error(self):
        tp = np.linspace(0, 100, 101)[:, None]
        t = tp + np.linspace(0, 3, 31)[None, :]
        diff = np.abs(TrueKernel("1d-infrank", J=20)(tp, t) - TrueKernel("1d-infrank", J=40)(tp, t))
        assert diff.max() < 2.0 ** -19 * 0.3

    def test_spatial_exponential(self):
        k = TrueKernel("2d-exp")
        np.testing.assert_allclose(k(0.0, 1.0, np.array([0.5]), np.array([0.7])),
                                   0.5 * np.exp(-1.5) * np.exp(-0.4), rtol=1e-12)

    def test_inhibition_changes_sign(self):
        k = TrueKernel("3d-inhib")
        sp = np.zeros(2)
        near = k(0.0, 0.1, sp, np.array([0.05, 0.0]))
        ring = k(0.0, 0.1, sp, np.array([0.25, 0.0]))  # cos(2.5) < 0
        assert near > 0 > ring

    def test_mixture_reference_point(self):
        k = TrueKernel("3d-mixture")
        sp, s = np.array([0.1, -0.2]), np.array([0.3, 0.4])
        tp, t = 2.0, 3.5
        nu = s - sp
        g = lambda x, sig: np.exp(-np.sum(x ** 2) / (2 * sig ** 2)) / (2 * np.pi * sig ** 2)
        u = [1 - 0.3 * (sp[1] + 1), 1 - 0.4 * (sp[1] + 1)]
        v = [g(nu, 0.2), g(nu - 0.8, 0.3)]
        psi = [1 - 0.02 * tp, 1 - 0.02 * tp]
        phi = [np.exp(-2 * (t - tp)), (t - tp - 1) * (t - tp < 3)]
        alpha = [[0.6, 0.15], [0.225, 0.525]]  # rows r, columns l
        expected = sum(alpha[r][l] * u[r] * v[r] * psi[l] * phi[l] for r in range(2) for l in range(2))
        np.testing.assert_allclose(k(tp, t, sp, s), expected, rtol=1e-12)

    def test_unknown_id(self):
        with pytest.raises(ConfigurationError):
            TrueKernel("4d-magic")

    def test_causality_enforced(self):
        with pytest.raises(ConfigurationError):
            true_kernel_eval(TrueKernel("1d-exp"), 2.0, 1.0)

    @pytest.mark.parametrize("kid", KERNEL_IDS)
    def test_presets_match_dimension(self, kid):
        assert len(DATASET_PRESETS[kid]["bounds"]) == TrueKernel(kid).spatial_dim


class TestTrueModel:
    def test_exponential_loglik_closed_form(self):
        seq = EventSequence([0.5, 1.2, 4.0, 4.1], 6.0)
        tm = TrueModel("1d-exp", 0.5)
        lam = [0.5 + sum(0.8 * np.exp(-(t - s)) for s in seq.times[:i]) for i, t in enumerate(seq.times)]
        comp = 0.5 * 6.0 + sum(0.8 * (1 - np.exp(-(6.0 - s))) for s in seq.times)
        np.testing.assert_allclose(tm.log_likelihood(seq), np.sum(np.log(lam)) - comp, rtol=1e-10)

    def test_intensity_at_grid(self):
        seq = EventSequence([1.0], 3.0)
        tm = TrueModel("1d-exp", 0.5)
        lam = tm.intensity_at(seq, [0.5, 1.0, 2.0])
        np.testing.assert_allclose(lam[:, 0], [0.5, 0.5, 0.5 + 0.8 * np.exp(-1.0)])

    def test_nonpositive_event_intensity_gives_minus_infinity(self):
        tm = TrueModel("3d-inhib", 0.01)
        bounds = [[-1, 1], [-1, 1]]
        seq = EventSequence([0.0, 0.01], 1.0, [[0.0, 0.0], [0.25, 0.0]], bounds)
        assert tm.log_likelihood(seq) == -np.inf


class TestThinningMechanics:
    def test_rate_equal_to_bound_accepts_everything(self):
        cfg = SimConfig(T=200.0, lam_bar=2.0)
        a = thinning_sample(constant(2.0), cfg, np.random.default_rng(0))
        assert abs(len(a) - 400) < 4 * 20

    def test_zero_rate_gives_empty_sequence(self):
        seq = thinning_sample(constant(0.0), SimConfig(T=10.0, lam_bar=5.0), np.random.default_rng(0))
        assert len(seq) == 0 and seq.T == 10.0

    def test_events_inside_window(self):
        cfg = SimConfig(T=5.0, bounds=[[2.0, 3.0], [-1.0, 0.0]], lam_bar=10.0)
        seq = thinning_sample(constant(10.0), cfg, np.random.default_rng(1))
        assert np.all(seq.times < 5.0) and np.all(np.diff(seq.times) > 0)
        assert np.all((seq.locs[:, 0] >= 2) & (seq.locs[:, 0] <= 3))
        assert np.all((seq.locs[:, 1] >= -1) & (seq.locs[:, 1] <= 0))

    def test_domination_violation(self):
        with pytest.raises(DominationError) as err:
            thinning_sample(constant(3.0), SimConfig(T=5.0, lam_bar=1.0), np.random.default_rng(0))
        assert err.value.sup_seen == 3.0

    def test_requires_bound(self):
        with pytest.raises(ConfigurationError):
            thinning_sample(constant(1.0), SimConfig(T=1.0))

    @pytest.mark.parametrize("kw", [dict(T=0.0), dict(T=1.0, lam_bar=0.0), dict(T=1.0, n_sequences=-1),
                                    dict(T=1.0, bounds=[[1.0, 1.0]])])
    def test_config_validation(self, kw):
        with pytest.raises(ConfigurationError):
            SimConfig(**kw)

    def test_pilot_bound_dominates(self):
        tm = TrueModel("1d-exp", 0.5)
        lam_bar = pilot_lam_bar(tm.intensity, 50.0, np.zeros((0, 2)), 0)
        assert lam_bar >= 3 * 0.5


class TestThinningStatistics:
    def test_homogeneous_interarrivals_exponential(self):
        mu, T = 2.0, 500.0
        gaps = []
        rng = np.random.default_rng(7)
        while sum(len(g) for g in gaps) < 10_000:
            seq = thinning_sample(constant(mu), SimConfig(T=T, lam_bar=3.0), rng)
            gaps.append(np.diff(np.concatenate([[0.0], seq.times])))
        gaps = np.concatenate(gaps)
        assert stats.kstest(gaps, "expon", args=(0, 1 / mu)).pvalue > 0.01

    def test_homogeneous_locations_uniform(self):
        cfg = SimConfig(T=200.0, bounds=[[0.0, 2.0], [0.0, 1.0]], lam_bar=12.0)
        seq = thinning_sample(constant(10.0), cfg, np.random.default_rng(3))
        counts, _, _ = np.histogram2d(seq.locs[:, 0], seq.locs[:, 1], bins=[8, 4], range=[[0, 2], [0, 1]])
        assert stats.chisquare(counts.ravel()).pvalue > 0.01

    @pytest.mark.parametrize("lam_bar", [1.5, 3.0])
    def test_mean_count_within_three_se(self, lam_bar):
        mu, T, area, n = 1.0, 20.0, 2.0, 300
        cfg = SimConfig(T=T, bounds=[[0.0, 2.0]], lam_bar=lam_bar)
        rng = np.random.default_rng(int(lam_bar * 10))
        counts = [len(thinning_sample(constant(mu), cfg, rng)) for _ in range(n)]
        expected = mu * T * area
        assert abs(np.mean(counts) - expected) < 3 * np.sqrt(expected / n)

    def test_exponential_hawkes_mean_count(self):
        # E N(T) = mu T / (1 - n) - mu n (1 - exp(-(1 - n) T)) / (1 - n)^2 for branching ratio n, unit decay
        mu, T, n = 0.5, 50.0, 0.8
        expected = mu * T / (1 - n) - mu * n * (1 - np.exp(-(1 - n) * T)) / (1 - n) ** 2
        ds = generate_dataset("1d-exp", mu, SimConfig(T=T, n_sequences=300, seed=2))
        counts = np.array([len(s) for s in ds.sequences])
        assert abs(counts.mean() - expected) < 3 * counts.std(ddof=1) / np.sqrt(len(counts))

    def test_doubling_bound_keeps_count_distribution(self):
        counts = []
        for lam_bar in (40.0, 80.0):
            ds = generate_dataset("1d-exp", 0.5, SimConfig(T=20.0, n_sequences=150, seed=int(lam_bar), lam_bar=lam_bar))
            counts.append(np.array([len(s) for s in ds.sequences], dtype=float))
        se = np.sqrt(sum(c.var(ddof=1) / c.size for c in counts))
        assert abs(counts[0].mean() - counts[1].mean()) < 3 * se

    def test_violated_pilot_bound_restarts(self, caplog, monkeypatch):
        monkeypatch.setattr(simulate, "pilot_lam_bar", lambda *a, **k: 0.6)
        cfg = SimConfig(T=30.0, n_sequences=5, seed=3)
        ds = generate_dataset("1d-exp", 0.5, cfg)
        assert "restarting" in caplog.text
        assert ds.meta["lam_bar"] > 0.6
        again = generate_dataset("1d-exp", 0.5, SimConfig(T=30.0, n_sequences=5, seed=3, lam_bar=ds.meta["lam_bar"]))
        assert again.sequences == ds.sequences

    def test_explicit_bound_violation_raises(self):
        with pytest.raises(DominationError):
            generate_dataset("1d-exp", 0.5, SimConfig(T=50.0, n_sequences=5, seed=0, lam_bar=0.6))


class TestDatasets:
    def test_reproducible_and_thread_independent(self):
        cfg = SimConfig(T=10.0, bounds=[[0.0, 1.0]], n_sequences=12, seed=5)
        a = generate_dataset("2d-exp", 1.0, cfg)
        b = generate_dataset("2d-exp", 1.0, cfg, threads=3)
        assert a == b
        c = generate_dataset("2d-exp", 1.0, SimConfig(T=10.0, bounds=[[0.0, 1.0]], n_sequences=12, seed=6))
        assert a != c

    def test_prefix_stable_in_sequence_count(self):
        small = generate_dataset("1d-exp", 0.5, SimConfig(T=10.0, n_sequences=3, seed=2, lam_bar=20.0))
        big = generate_dataset("1d-exp", 0.5, SimConfig(T=10.0, n_sequences=6, seed=2, lam_bar=20.0))
        assert small.sequences == big.sequences[:3]

    def test_sequence_seeds_are_spawn_children(self):
        a = sequence_seeds(4, 3)[2]
        b = np.random.SeedSequence(4, spawn_key=(2,))
        assert a.generate_state(4).tolist() == b.generate_state(4).tolist()

    def test_meta(self):
        ds = generate_dataset("1d-nonstat", 1.0, SimConfig(T=5.0, n_sequences=2, seed=0))
        assert ds.meta["kernel"] == "1d-nonstat" and ds.meta["n_marks"] == 0 and ds.meta["lam_bar"] > 0
        assert len(ds) == 2

    def test_zero_sequences(self):
        ds = generate_dataset("1d-exp", 0.5, SimConfig(T=5.0, n_sequences=0, lam_bar=5.0))
        assert len(ds) == 0

    def test_bounds_dimension_checked(self):
        with pytest.raises(ConfigurationError):
            generate_dataset("2d-exp", 1.0, SimConfig(T=5.0, n_sequences=1))
