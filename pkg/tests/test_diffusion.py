import numpy as np
import pytest

from cfgad.diffusion import (NoisePredictor, forward_sample, high_pass,
                             make_schedule, node_streams, reverse_chain,
                             reverse_step, sample, timestep_embedding,
                             train_ddpm, translate, translate_batch)
from cfgad.tensor import ShapeError

from test_graph import grid_graph


class ZeroNet:
    """Predictor stub returning a constant; duck-types NoisePredictor."""

    def __init__(self, value=0.0, dim=1):
        self.value = value
        self.dim = dim

    def predict(self, z_t, t):
        return np.full(np.atleast_2d(np.asarray(z_t, dtype=float)).shape, self.value)


class TestSchedule:
    def test_first_alpha_bar(self):
        sched = make_schedule()
        assert sched.alpha_bar[0] == pytest.approx(1 - 1e-4)
        assert sched.alpha_bar_at(0) == 1.0

    def test_strictly_decreasing(self):
        sched = make_schedule()
        assert (np.diff(sched.alpha_bar) < 0).all()
        assert (np.diff(sched.beta) > 0).all()
        assert 0 < sched.beta[0] < sched.beta[-1] < 1

    def test_final_alpha_bar_matches_product_loop_oracle(self):
        sched = make_schedule()
        prod = 1.0
        for b in sched.beta:
            prod *= 1.0 - b
        assert abs(sched.alpha_bar[-1] - prod) < 1e-12

    def test_sigma_is_sqrt_beta(self):
        sched = make_schedule(steps=10)
        assert np.allclose(sched.sigma ** 2, sched.beta)

    def test_invalid_endpoints(self):
        with pytest.raises(ValueError):
            make_schedule(steps=0)
        with pytest.raises(ValueError):
            make_schedule(beta_start=0.0)
        with pytest.raises(ValueError):
            make_schedule(beta_start=0.5, beta_end=0.1)
        with pytest.raises(ValueError):
            make_schedule(beta_end=1.0)


class TestForwardSample:
    def test_zero_noise_scales_the_signal(self):
        sched = make_schedule(steps=100)
        z0 = np.array([2.0, -1.0])
        zt = forward_sample(z0, 40, np.zeros(2), sched)
        assert np.allclose(zt, np.sqrt(sched.alpha_bar[39]) * z0)

    def test_late_t_approaches_pure_noise(self):
        sched = make_schedule()
        eps = np.array([0.3, -0.8])
        zt = forward_sample(np.array([5.0, 5.0]), 1000, eps, sched)
        assert np.abs(zt - eps).max() < 0.05

    def test_out_of_range_t(self):
        sched = make_schedule(steps=10)
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 0, np.zeros(2), sched)
        with pytest.raises(ValueError):
            forward_sample(np.zeros(2), 11, np.zeros(2), sched)

    def test_monte_carlo_variance(self):
        sched = make_schedule()
        rng = np.random.default_rng(0)
        n = 20_000
        for t in (5, 200):
            eps = rng.standard_normal(n)
            zt = forward_sample(np.full(n, 1.7), t, eps, sched)
            resid = zt - np.sqrt(sched.alpha_bar[t - 1]) * 1.7
            var = resid.var()
            want = 1 - sched.alpha_bar[t - 1]
            mc_err = want * np.sqrt(2.0 / (n - 1))
            assert abs(var - want) < 3 * mc_err


class TestReverseStep:
    def test_zero_predictor_collapses_to_rescaling(self):
        sched = make_schedule(steps=50)
        z = np.array([1.0, -2.0])
        out = reverse_step(z, 30, ZeroNet(0.0), sched, 0.0)
        assert np.allclose(out, z / np.sqrt(sched.alpha[29]))

    def test_hand_evaluated_scalar_case(self):
        # alpha_t = 0.99, abar_t = 0.5, eps_hat = 0.1, z_t = 1, no noise
        sched = make_schedule(steps=3)
        sched.alpha[1] = 0.99
        sched.alpha_bar[1] = 0.5
        expected = (1.0 - (1.0 - 0.99) / np.sqrt(1.0 - 0.5) * 0.1) / np.sqrt(0.99)
        out = reverse_step(np.array([1.0]), 2, ZeroNet(0.1), sched, 0.0)
        assert out[0] == pytest.approx(expected, abs=1e-15)

    def test_fixed_seed_trajectory_is_deterministic(self):
        sched = make_schedule(steps=20)
        net = ZeroNet(0.05)
        out1 = reverse_chain(np.ones((2, 3)), net, sched,
                             np.random.default_rng(5))
        out2 = reverse_chain(np.ones((2, 3)), net, sched,
                             np.random.default_rng(5))
        assert np.array_equal(out1, out2)

    def test_exact_noise_recovers_posterior_mean(self):
        # if the predictor returns the exact noise of the closed form and
        # the stochastic term is off, the scalar case inverts exactly
        sched = make_schedule(steps=40)
        z0 = np.array([0.8])
        eps = np.array([-0.6])
        t = 17
        zt = forward_sample(z0, t, eps, sched)

        class Exact:
            def predict(self, z, _t):
                return eps.reshape(1, -1)

        out = reverse_step(zt, t, Exact(), sched, 0.0)
        alpha = sched.alpha[t - 1]
        abar = sched.alpha_bar[t - 1]
        mean = (zt - (1 - alpha) / np.sqrt(1 - abar) * eps) / np.sqrt(alpha)
        assert abs(out[0] - mean[0]) < 1e-10


class TestTimestepEmbeddingAndPredictor:
    def test_embedding_shape_and_range(self):
        emb = timestep_embedding([1, 500, 1000], width=32)
        assert emb.shape == (3, 32)
        assert (np.abs(emb) <= 1.0).all()
        assert not np.allclose(emb[0], emb[1])

    def test_untrained_predictor_outputs_zero(self):
        net = NoisePredictor(4, np.random.default_rng(0))
        out = net.predict(np.random.default_rng(1).standard_normal((5, 4)), 3)
        assert np.array_equal(out, np.zeros((5, 4)))

    def test_input_output_widths_match(self):
        net = NoisePredictor(6, np.random.default_rng(0))
        out = net.predict(np.zeros((2, 6)), 1)
        assert out.shape == (2, 6)


class TestTrainDdpm:
    def test_initial_loss_is_embedding_dimension(self):
        # untrained predictor emits zeros, so the loss is E||eps||^2 = dim
        rng = np.random.default_rng(0)
        dim = 5
        emb = rng.standard_normal((400, dim))
        sched = make_schedule(steps=100)
        _, losses = train_ddpm(emb, sched, epochs=1, lr=0.0, seed=1)
        assert losses[0] == pytest.approx(dim, rel=0.2)

    def test_zero_epochs_returns_fresh_predictor(self):
        sched = make_schedule(steps=50)
        net, losses = train_ddpm(np.zeros((4, 2)), sched, epochs=0, seed=0)
        assert losses == []
        assert np.array_equal(net.predict(np.ones((1, 2)), 5), np.zeros((1, 2)))

    def test_loss_halves_on_desk_scale_data(self):
        rng = np.random.default_rng(3)
        emb = rng.standard_normal((128, 2)) * 0.3
        sched = make_schedule(steps=100)
        _, losses = train_ddpm(emb, sched, epochs=400, lr=2e-3, seed=3)
        k = 20
        assert np.mean(losses[-k:]) <= 0.5 * np.mean(losses[:k])

    def test_point_mass_sampling_concentrates_at_origin(self):
        dim = 3
        sched = make_schedule(steps=150)
        emb = np.zeros((128, dim))
        net, _ = train_ddpm(emb, sched, epochs=800, lr=2e-3, seed=5)
        out = sample(net, sched, 64, np.random.default_rng(9))
        mean_norm = np.linalg.norm(out, axis=1).mean()
        assert mean_norm < 0.1 * np.sqrt(dim)


class TestHighPass:
    def test_identical_neighbors_cancel(self):
        g = grid_graph([(0, 1), (0, 2)], 3, h=2)
        z = np.tile([1.5, -0.5], (3, 1))
        assert np.array_equal(high_pass(z, g, 0), np.zeros(2))

    def test_isolated_node_returns_zero(self):
        g = grid_graph([(0, 1)], 3, h=2)
        assert np.array_equal(high_pass(np.ones((3, 2)), g, 2), np.zeros(2))

    def test_hand_computed_mean_subtraction(self):
        g = grid_graph([(0, 1), (0, 2)], 3, h=2)
        z = np.array([[1.0, 0.0], [0.0, 0.0], [2.0, 2.0]])
        assert np.allclose(high_pass(z, g, 0), [0.0, -1.0])

    def test_symmetric_mode(self):
        g = grid_graph([(0, 1)], 2, h=2)
        z = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = high_pass(z, g, 0, mode="sym")
        assert np.allclose(out, z[0] - z[1] / np.sqrt(1 * 1))
        with pytest.raises(ValueError):
            high_pass(z, g, 0, mode="bogus")


def _translate_inputs(dim=3, seed=123, node=7):
    rng = np.random.default_rng(seed)
    return dict(
        z_src=rng.standard_normal(dim),
        z_ref=rng.standard_normal(dim) + 2.0,
        src_context=rng.standard_normal(dim) * 0.5,
        ref_context=rng.standard_normal(dim) * 0.5,
        src_context_size=3,
        ref_context_size=5,
    )


class TestTranslate:
    def test_gamma_zero_equals_unconditional_reverse_bitwise(self):
        sched = make_schedule(steps=30)
        net = ZeroNet(0.02)
        kw = _translate_inputs()
        out = translate(kw["z_src"], kw["z_ref"], net, sched, 0.0,
                        src_context=kw["src_context"],
                        ref_context=kw["ref_context"],
                        src_context_size=kw["src_context_size"],
                        ref_context_size=kw["ref_context_size"],
                        rngs=node_streams(99, 4))
        rng_prior, rng_rev, _ = node_streams(99, 4)
        abar = sched.alpha_bar[-1]
        prior = (np.sqrt(abar) * kw["z_src"]
                 + np.sqrt(1 - abar) * rng_prior.standard_normal(3))
        unconditional = reverse_chain(prior, net, sched, rng_rev)
        assert np.array_equal(out, unconditional.ravel())

    def test_output_width_matches_input_width(self):
        sched = make_schedule(steps=10)
        for dim in (1, 4, 9):
            net = ZeroNet(0.0, dim)
            kw = _translate_inputs(dim=dim)
            out = translate(kw["z_src"], kw["z_ref"], net, sched, 1.1,
                            src_context=kw["src_context"],
                            ref_context=kw["ref_context"],
                            rngs=node_streams(1, 2))
            assert out.shape == (dim,)

    def test_width_mismatch_rejected(self):
        sched = make_schedule(steps=5)
        with pytest.raises(ShapeError):
            translate(np.zeros(3), np.zeros(4), ZeroNet(), sched, 1.0,
                      src_context=np.zeros(3), ref_context=np.zeros(4),
                      rngs=node_streams(0, 0))

    def test_deterministic_given_seed_and_inputs(self):
        sched = make_schedule(steps=25)
        net = ZeroNet(0.01)
        kw = _translate_inputs()
        outs = []
        for _ in range(2):
            outs.append(translate(
                kw["z_src"], kw["z_ref"], net, sched, 1.1,
                src_context=kw["src_context"], ref_context=kw["ref_context"],
                src_context_size=kw["src_context_size"],
                ref_context_size=kw["ref_context_size"],
                rngs=node_streams(42, 3)))
        assert np.array_equal(outs[0], outs[1])

    def test_loop_matches_independent_scalar_replication(self):
        # replay the whole guided loop with independently written arithmetic
        sched = make_schedule(steps=4, beta_start=0.05, beta_end=0.2)
        net = ZeroNet(0.0)
        gamma = 0.9
        kw = _translate_inputs(dim=2, seed=5)
        out = translate(kw["z_src"], kw["z_ref"], net, sched, gamma,
                        src_context=kw["src_context"],
                        ref_context=kw["ref_context"],
                        src_context_size=kw["src_context_size"],
                        ref_context_size=kw["ref_context_size"],
                        rngs=node_streams(7, 11))

        rng_prior, rng_rev, rng_guid = node_streams(7, 11)
        abar = {t: sched.alpha_bar_at(t) for t in range(0, 5)}
        z = (np.sqrt(abar[4]) * kw["z_src"]
             + np.sqrt(1 - abar[4]) * rng_prior.standard_normal(2))
        for t in (4, 3, 2, 1):
            noise = rng_rev.standard_normal(2) if t > 1 else 0.0
            alpha_t = sched.alpha[t - 1]
            z_hat = z / np.sqrt(alpha_t) + sched.sigma[t - 1] * noise
            a, b = np.sqrt(abar[t - 1]), np.sqrt(1 - abar[t - 1])
            ref_t = a * kw["z_ref"] + b * rng_guid.standard_normal(2)
            ref_c = (a * kw["ref_context"]
                     + b / np.sqrt(kw["ref_context_size"]) * rng_guid.standard_normal(2))
            src_c = (a * kw["src_context"]
                     + b / np.sqrt(kw["src_context_size"]) * rng_guid.standard_normal(2))
            z = z_hat + gamma * ((ref_t - ref_c) - (z_hat - src_c))
        assert np.allclose(out, z, atol=1e-12)

    def test_batch_rows_match_single_translations(self):
        sched = make_schedule(steps=15)
        net = ZeroNet(0.03)
        rng = np.random.default_rng(2)
        z_src = rng.standard_normal((3, 4))
        contexts = rng.standard_normal((3, 4))
        sizes = np.array([2.0, 5.0, 1.0])
        z_ref = rng.standard_normal(4)
        ref_ctx = rng.standard_normal(4)
        nodes = [10, 20, 30]
        batch = translate_batch(z_src, z_ref, net, sched, 1.1,
                                src_contexts=contexts, ref_context=ref_ctx,
                                src_context_sizes=sizes, ref_context_size=4,
                                rng_triples=[node_streams(0, v) for v in nodes])
        for i, v in enumerate(nodes):
            single = translate(z_src[i], z_ref, net, sched, 1.1,
                               src_context=contexts[i], ref_context=ref_ctx,
                               src_context_size=sizes[i], ref_context_size=4,
                               rngs=node_streams(0, v))
            assert np.array_equal(batch[i], single)

    def test_partial_prior_steps(self):
        sched = make_schedule(steps=20)
        net = ZeroNet(0.0)
        kw = _translate_inputs()
        out = translate(kw["z_src"], kw["z_ref"], net, sched, 0.5,
                        src_context=kw["src_context"],
                        ref_context=kw["ref_context"],
                        rngs=node_streams(3, 3), prior_steps=5)
        assert out.shape == (3,)
        with pytest.raises(ValueError):
            translate(kw["z_src"], kw["z_ref"], net, sched, 0.5,
                      src_context=kw["src_context"],
                      ref_context=kw["ref_context"],
                      rngs=node_streams(3, 3), prior_steps=50)


def test_closed_form_matches_iterated_single_steps():
    # iterating the one-step forward kernel t times must agree with the
    # closed form in both first and second moments
    sched = make_schedule()
    rng = np.random.default_rng(11)
    n = 20_000
    z0 = 1.3
    for t in (1, 10):
        iterated = np.full(n, z0)
        for s in range(1, t + 1):
            iterated = (np.sqrt(1 - sched.beta[s - 1]) * iterated
                        + np.sqrt(sched.beta[s - 1]) * rng.standard_normal(n))
        closed = forward_sample(np.full(n, z0), t, rng.standard_normal(n), sched)
        for moment in (1, 2):
            a = (iterated ** moment).mean()
            b = (closed ** moment).mean()
            se = np.sqrt((iterated ** (2 * moment)).var() / n) + \
                np.sqrt((closed ** (2 * moment)).var() / n)
            assert abs(a - b) <= 4 * max(se, 1e-4)
