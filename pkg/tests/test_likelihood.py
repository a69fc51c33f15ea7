import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nskernel.errors import ConfigurationError, InfeasibleError
from nskernel.grids import GridSpec, build_tables
from nskernel.likelihood import (barrier, barrier_marked, grad_objective, grid_values, integral_term, intensity_at,
                                 log_likelihood, log_likelihoods, log_summation, make_batch, min_intensity,
                                 objective, objective_parts)
from nskernel.model import EventSequence, init_model, intensity

from conftest import CASES, UNIT_SQUARE, fd_mismatches, random_sequence, small_case
from oracles import dense_loglik, random_instance


class TestPoissonClosedForm:
    """With alpha = 0 the process is homogeneous Poisson: ll = n log mu - mu T |S|."""

    @pytest.mark.parametrize("d", [0, 1, 2])
    def test_loglik(self, d, rng):
        m = init_model(spatial_dim=d, a_max=0.4 if d else None, hidden=(4,), mu=1.7)
        m.alpha[...] = 0.0
        bounds = [[0.0, 2.0]] * d if d else None
        seq = random_sequence(rng, 9, T=4.0, bounds=bounds)
        area = 2.0 ** d
        np.testing.assert_allclose(log_likelihood(m, seq), 9 * np.log(1.7) - 1.7 * 4.0 * area, rtol=1e-12)

    def test_empty_sequence(self):
        m = init_model(mu=0.5)
        np.testing.assert_allclose(log_likelihood(m, EventSequence([], 3.0)), -1.5)


class TestAgainstDirectEvaluation:
    def test_temporal_fine_grid_is_near_exact(self, rng):
        m = init_model(L=2, tau_max=2.0, hidden=(8, 8), mu=2.0, seed=3, t_scale=6.0)
        seq = random_sequence(rng, 12, T=6.0)
        fine = GridSpec.for_model(m, n_t=4001)
        np.testing.assert_allclose(log_likelihood(m, seq, grids=fine), dense_loglik(m, seq, n_time=64), rtol=1e-6)

    def test_log_summation_matches_direct_intensity(self, rng):
        m = init_model(spatial_dim=1, a_max=0.5, hidden=(8,), mu=2.0, seed=4)
        seq = random_sequence(rng, 8, T=4.0, bounds=[[0.0, 1.0]])
        fine = GridSpec.for_model(m, n_t=4001)
        direct = sum(np.log(intensity(m, seq, t, seq.locs[i])) for i, t in enumerate(seq.times))
        np.testing.assert_allclose(log_summation(m, seq, grids=fine), direct, rtol=1e-7)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_default_grids_within_one_percent(self, seed):
        m, seq, g = random_instance(100 + seed)
        np.testing.assert_allclose(log_likelihood(m, seq, grids=g), dense_loglik(m, seq), rtol=1e-2)

    def test_intensity_at_matches_direct(self, rng):
        m = init_model(spatial_dim=2, a_max=0.6, hidden=(8,), mu=1.0, seed=5)
        seq = random_sequence(rng, 6, T=3.0, bounds=UNIT_SQUARE)
        g = GridSpec.for_model(m, n_t=4001)
        times = np.array([0.5, 1.7, 2.9])
        locs = np.array([[0.2, 0.3], [0.8, 0.5]])
        lam = intensity_at(m, seq, times, locs, g)
        direct = [[intensity(m, seq, t, s) for s in locs] for t in times]
        np.testing.assert_allclose(lam, direct, rtol=1e-6)


class TestConsistency:
    @pytest.mark.parametrize("kind", CASES)
    def test_batched_equals_single(self, kind):
        m, seqs, g = small_case(kind)
        batch = log_likelihoods(m, seqs, g)
        single = [log_likelihood(m, s, grids=g) for s in seqs]
        np.testing.assert_allclose(batch, single, rtol=1e-12)

    @pytest.mark.parametrize("kind", CASES)
    def test_tables_path(self, kind):
        m, seqs, g = small_case(kind)
        tab = build_tables(m, g)
        np.testing.assert_allclose(log_likelihoods(m, seqs, g, tables=tab), log_likelihoods(m, seqs, g), rtol=1e-12)

    def test_decomposition(self, rng):
        m, seqs, g = small_case("spatial2")
        s = seqs[0]
        np.testing.assert_allclose(log_likelihood(m, s, grids=g),
                                   log_summation(m, s, grids=g) - integral_term(m, s, grids=g), rtol=1e-12)

    def test_truncation_exactness(self):
        """An event farther back than tau_max has no influence on a later event."""
        m = init_model(tau_max=1.0, hidden=(4,), mu=2.0, seed=1)
        g = GridSpec.for_model(m)
        a = EventSequence([0.0, 1.5], 2.0)
        only = log_summation(m, EventSequence([1.5], 2.0), grids=g)
        np.testing.assert_allclose(log_summation(m, a, grids=g), np.log(2.0) + only, rtol=1e-14)

    def test_objective_is_nll_plus_scaled_barrier(self):
        m, seqs, g = small_case("temporal")
        b = float(grid_values(m, seqs, g).min()) - 0.1
        expected = -log_likelihoods(m, seqs, g).sum() + barrier(m, seqs, g, b) / 3.0
        np.testing.assert_allclose(objective(m, seqs, 3.0, b, g), expected, rtol=1e-12)

    def test_barrier_constant_intensity(self):
        m = init_model(hidden=(4,), mu=1.0)
        m.alpha[...] = 0.0
        g = GridSpec.for_model(m, n_bar_t=13)
        seqs = [EventSequence([0.5, 1.0], 2.0)]
        np.testing.assert_allclose(barrier(m, seqs, g, 0.9), -np.log(0.1), rtol=1e-12)

    def test_marked_barrier_requires_marked_model(self):
        m, seqs, g = small_case("temporal")
        with pytest.raises(ConfigurationError):
            barrier_marked(m, seqs, g, 0.0)
        mm, mseqs, mg = small_case("marked")
        with pytest.raises(ConfigurationError):
            barrier(mm, mseqs, mg, 0.0)
        assert np.isfinite(barrier_marked(mm, mseqs, mg, float(grid_values(mm, mseqs, mg).min()) - 1.0))

    def test_objective_parts_sets_b(self):
        m, seqs, g = small_case("temporal")
        batch = make_batch(m, seqs, g)
        _, _, parts = objective_parts(m, batch, g, w=1.0, need_grad=False, eps_b=0.25)
        np.testing.assert_allclose(parts["b"], grid_values(m, seqs, g).min() - 0.25)
        ev, gr, _ = min_intensity(m, batch, g)
        np.testing.assert_allclose(parts["grid_lam_min"], gr)
        np.testing.assert_allclose(parts["event_min"], ev)


class TestInfeasibility:
    def test_negative_event_intensity_raises(self):
        m = init_model(hidden=(4,), mu=0.1, seed=0)
        m.nets["phi"][0].weights[-1][...] = 0.0
        m.nets["phi"][0].biases[-1][...] = -50.0
        m.nets["psi"][0].weights[-1][...] = 0.0
        m.nets["psi"][0].biases[-1][...] = 1.0
        seq = EventSequence([0.1, 0.2], 1.0)
        with pytest.raises(InfeasibleError) as err:
            log_likelihood(m, seq)
        assert err.value.index == (0, 1)

    def test_barrier_argument_must_be_positive(self):
        m, seqs, g = small_case("temporal")
        b = float(grid_values(m, seqs, g).min()) + 1e-3
        with pytest.raises(InfeasibleError):
            objective(m, seqs, 1.0, b, g)

    def test_dimension_mismatch(self, rng):
        m = init_model(spatial_dim=1, a_max=0.5)
        with pytest.raises(ConfigurationError):
            log_likelihood(m, EventSequence([0.5], 1.0))

    def test_absolute_model_horizon(self):
        m = init_model(temporal_param="absolute", t_max=2.0, tau_max=1.0)
        with pytest.raises(ConfigurationError):
            log_likelihood(m, EventSequence([0.5], 3.0))


class TestGradients:
    @pytest.mark.parametrize("kind", CASES)
    def test_all_coordinates_match_finite_differences(self, kind):
        m, seqs, g = small_case(kind, hidden=(4, 3))
        assert fd_mismatches(m, seqs, g) == []

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(CASES))
    def test_random_draws(self, seed, kind):
        m, seqs, g = small_case(kind, seed=seed, hidden=(5,))
        rng = np.random.default_rng(seed)
        params = m.params()
        names = list(params)
        coords = [("mu", 0), ("alpha", 0)]
        for _ in range(12):
            k = names[rng.integers(len(names))]
            coords.append((k, int(rng.integers(params[k].size))))
        assert fd_mismatches(m, seqs, g, coords) == []

    def test_gradient_keys_cover_parameters(self):
        m, seqs, g = small_case("marked")
        b = float(grid_values(m, seqs, g).min()) - 1.0
        _, grads = grad_objective(m, seqs, 1.0, b, g)
        assert set(grads) == set(m.params())
        for k, v in m.params().items():
            assert grads[k].shape == v.shape


class TestEvaluationBudget:
    def test_counts_are_linear_in_events(self, rng):
        m = init_model(spatial_dim=1, a_max=0.3, hidden=(4,), mu=3.0, seed=2)
        g = GridSpec.for_model(m, n_t=20, n_s=30, n_bar_t=5, n_bar_s=3)
        counts = []
        for n in (20, 40):
            seq = random_sequence(rng, n, T=float(n), bounds=[[0.0, 1.0]])
            m.reset_counters()
            b = float(grid_values(m, [seq], g).min()) - 1.0
            m.reset_counters()
            grad_objective(m, [seq], 1.0, b, g)
            counts.append(m.eval_counts())
        assert counts[0][("psi", 0)] == 20 and counts[1][("psi", 0)] == 40
        assert counts[0][("u", 0)] == 20 and counts[1][("u", 0)] == 40
        assert counts[0][("phi", 0)] == counts[1][("phi", 0)] == 20
