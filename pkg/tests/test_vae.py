"""Thermometer encoding, posterior heads, KL, and the ordinal decoder likelihood."""

import numpy as np
import pytest
from scipy.special import expit

from latmix import nn, vae
from latmix.errors import ValidationError
from latmix.vae import InstrumentSchema, ItemSpec


@pytest.fixture
def schema():
    return InstrumentSchema("test", (ItemSpec(5), ItemSpec(2), ItemSpec(4, has_flag=True),
                                     ItemSpec(3)))


@pytest.fixture
def vparams(schema):
    return vae.init_vae(schema, d=2, hidden=(6,), rng=np.random.default_rng(123))


class TestThermometer:
    def test_floor_case(self):
        np.testing.assert_array_equal(vae.thermometer_encode(0, 5), [0, 0, 0, 0])

    def test_definition(self):
        np.testing.assert_array_equal(vae.thermometer_encode(2, 5), [1, 1, 0, 0])

    def test_round_trip_exhaustive(self):
        for levels in range(2, 7):
            for c in range(levels):
                assert vae.thermometer_decode(vae.thermometer_encode(c, levels)) == c

    def test_out_of_range(self):
        with pytest.raises(ValidationError):
            vae.thermometer_encode(5, 5)
        with pytest.raises(ValidationError):
            vae.thermometer_encode(-1, 3)

    def test_monotone_blocks(self, schema):
        rng = np.random.default_rng(0)
        levels = np.column_stack([rng.integers(0, it.levels, 20) for it in schema.items])
        bits = vae.encode_inputs(schema, levels, np.zeros_like(levels, bool),
                                 np.zeros_like(levels, bool))
        col = 0
        for it in schema.items:
            block = bits[:, col:col + it.levels - 1]
            assert (np.diff(block, axis=1) <= 0).all()  # ones then zeros
            col += it.levels - 1 + int(it.has_flag)

    def test_encoded_width_matches_schema(self, schema):
        assert schema.encoded_width == (5 - 1) + (2 - 1) + (4 - 1 + 1) + (3 - 1)


class TestEncode:
    def test_zero_head_gives_constant_posterior(self, schema):
        rng = np.random.default_rng(1)
        params = vae.init_vae(schema, d=2, hidden=(4,), rng=rng)
        enc = params.encoder
        zeroed = nn.MlpParams(enc.weights[:-1] + (np.zeros_like(enc.weights[-1]),),
                              enc.biases[:-1] + (np.zeros_like(enc.biases[-1]),))
        params = vae.VaeParams(zeroed, params.decoder, params.cut_base, params.cut_incr)
        obs = vae.make_observation(schema, [1, 0, 2, 1])
        post = vae.encode(schema, params, obs)
        np.testing.assert_allclose(post.mu, 0.0)
        np.testing.assert_allclose(post.sigma, np.log(2.0) + 1e-4)

    def test_distinct_inputs_distinct_mu(self, schema, vparams):
        a = vae.encode(schema, vparams, vae.make_observation(schema, [0, 0, 0, 0]))
        b = vae.encode(schema, vparams, vae.make_observation(schema, [4, 1, 3, 2]))
        assert not np.allclose(a.mu, b.mu)

    def test_sigma_positive_sweep(self, schema, vparams):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            levels = np.array([rng.integers(0, it.levels) for it in schema.items])
            obs = vae.make_observation(schema, levels)
            post = vae.encode(schema, vparams, obs)
            assert (post.sigma > 0).all() and np.isfinite(post.sigma).all()


class TestReparameterize:
    def test_zero_noise(self):
        post = vae.VariationalPosterior(np.array([1.0, -2.0]), np.array([0.5, 2.0]))
        np.testing.assert_array_equal(vae.reparameterize(post, np.zeros(2)), post.mu)

    def test_standard_posterior(self):
        post = vae.VariationalPosterior(np.zeros(3), np.ones(3))
        eps = np.array([0.3, -1.2, 0.7])
        np.testing.assert_array_equal(vae.reparameterize(post, eps), eps)

    def test_monte_carlo_moments(self):
        rng = np.random.default_rng(3)
        mu = np.array([0.7, -0.4])
        sigma = np.array([1.3, 0.6])
        post = vae.VariationalPosterior(mu, sigma)
        n = 100_000
        draws = np.array([vae.reparameterize(post, rng.standard_normal(2)) for _ in range(n)])
        se_mean = sigma / np.sqrt(n)
        assert (np.abs(draws.mean(axis=0) - mu) < 3 * se_mean).all()
        se_var = sigma ** 2 * np.sqrt(2.0 / (n - 1))
        assert (np.abs(draws.var(axis=0) - sigma ** 2) < 3 * se_var).all()


class TestKl:
    def test_prior_equals_posterior(self):
        post = vae.VariationalPosterior(np.zeros(3), np.ones(3))
        assert vae.kl_std_normal(post) == 0.0

    def test_unit_mean_shift(self):
        post = vae.VariationalPosterior(np.array([1.0, 0.0, 0.0]), np.ones(3))
        assert vae.kl_std_normal(post) == pytest.approx(0.5)

    def test_matches_monte_carlo(self):
        rng = np.random.default_rng(4)
        mu = np.array([0.8, -0.3, 0.1])
        sigma = np.array([0.7, 1.4, 0.9])
        post = vae.VariationalPosterior(mu, sigma)
        n = 1_000_000
        z = mu + sigma * rng.standard_normal((n, 3))
        log_q = -0.5 * np.sum(((z - mu) / sigma) ** 2 + np.log(2 * np.pi * sigma ** 2), axis=1)
        log_p = -0.5 * np.sum(z ** 2 + np.log(2 * np.pi), axis=1)
        samples = log_q - log_p
        se = samples.std(ddof=1) / np.sqrt(n)
        assert abs(vae.kl_std_normal(post) - samples.mean()) < 3 * se

    def test_invalid_sigma(self):
        with pytest.raises(ValidationError):
            vae.VariationalPosterior(np.zeros(2), np.array([1.0, 0.0]))


class TestDecodeOrdinal:
    def test_probabilities_sum_to_one(self, schema, vparams):
        rng = np.random.default_rng(5)
        for _ in range(20):
            out = vae.decode_ordinal(schema, vparams, rng.standard_normal(2))
            for j in range(schema.n_items):
                p = vae.item_probs(out, j)
                assert (p > 0).all()
                assert abs(p.sum() - 1.0) < 1e-12

    def test_extreme_location_tops_out(self, schema, vparams):
        out = vae.decode_ordinal(schema, vparams, np.zeros(2))
        for j, item in enumerate(schema.items):
            shifted = vae.OrdinalDecoderOutput(
                schema, out.locations.copy(), out.cutpoints, out.flag_logits)
            shifted.locations[j] = out.cutpoints[j][-1] + 20.0
            p = vae.item_probs(shifted, j)
            assert p[-1] > 1 - 1e-8

    def test_cutpoints_increasing_sweep(self, schema):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            params = vae.init_vae(schema, 2, (3,), rng)
            params = params.replace_arrays(
                [rng.standard_normal(a.shape) * 2 for a in params.arrays()])
            for kappa in vae.build_cutpoints(params, schema):
                assert (np.diff(kappa) > 0).all()


class TestReconLoglik:
    def test_symmetric_two_level_item(self):
        schema = InstrumentSchema("one", (ItemSpec(2),))
        params = vae.init_vae(schema, 1, (2,), np.random.default_rng(0))
        out = vae.decode_ordinal(schema, params, np.zeros(1))
        # location exactly at the single cutpoint -> both levels get probability 1/2
        out = vae.OrdinalDecoderOutput(schema, np.array([out.cutpoints[0][0]]),
                                       out.cutpoints, out.flag_logits)
        for level in (0, 1):
            obs = vae.make_observation(schema, [level])
            assert vae.recon_loglik(out, obs) == pytest.approx(np.log(0.5), abs=1e-12)

    def test_all_missing_contributes_zero(self, schema, vparams):
        obs = vae.make_observation(schema, [0, 0, 0, 0], missing=[1, 1, 1, 1])
        out = vae.decode_ordinal(schema, vparams, np.zeros(2))
        assert vae.recon_loglik(out, obs) == 0.0

    def test_matches_scalar_recomputation(self, schema, vparams):
        rng = np.random.default_rng(7)
        z = rng.standard_normal(2)
        out = vae.decode_ordinal(schema, vparams, z)
        levels = np.array([rng.integers(0, it.levels) for it in schema.items])
        cannot = np.array([False, False, True, False])
        obs = vae.make_observation(schema, levels, cannot=cannot)
        expected = 0.0
        for j, item in enumerate(schema.items):
            kappa = out.cutpoints[j]
            loc = out.locations[j]
            if item.has_flag:
                pf = 1.0 / (1.0 + np.exp(-out.flag_logits[list(schema.flagged_idx).index(j)]))
                expected += np.log(pf if cannot[j] else 1 - pf)
                if cannot[j]:
                    continue
            c = levels[j]
            hi = 1.0 if c == item.levels - 1 else 1.0 / (1.0 + np.exp(-(kappa[c] - loc)))
            lo = 0.0 if c == 0 else 1.0 / (1.0 + np.exp(-(kappa[c - 1] - loc)))
            expected += np.log(hi - lo)
        assert vae.recon_loglik(out, obs) == pytest.approx(expected, abs=1e-12)

    def test_ordinal_probs_match_monte_carlo(self, schema, vparams):
        """Closed-form category probabilities vs logistic sampling."""
        rng = np.random.default_rng(8)
        out = vae.decode_ordinal(schema, vparams, np.array([0.4, -0.2]))
        n = 100_000
        for j, item in enumerate(schema.items):
            draws = rng.logistic(loc=out.locations[j], size=n)
            counts = np.array([(np.sum(draws > (out.cutpoints[j][c - 1] if c else -np.inf))
                                - np.sum(draws > (out.cutpoints[j][c] if c < item.levels - 1 else np.inf)))
                               for c in range(item.levels)]) / n
            p = vae.item_probs(out, j)
            se = np.sqrt(p * (1 - p) / n)
            assert (np.abs(counts - p) < 3 * se + 1e-12).all()


class TestReconGradients:
    def _ll(self, schema, vp, z, levels, missing, cannot):
        h, _ = nn.mlp_forward(vp.decoder, z[None, :])
        locs = h[:, :schema.n_items]
        flags = h[:, schema.n_items:]
        ll, _ = vae.ordinal_batch_loglik(schema, vp, locs, flags, levels[None, :],
                                         missing[None, :], cannot[None, :])
        return ll

    def test_grad_z_and_decoder_params(self, schema, vparams):
        rng = np.random.default_rng(9)
        z = rng.standard_normal(2)
        levels = np.array([rng.integers(0, it.levels) for it in schema.items])
        missing = np.array([False, True, False, False])
        cannot = np.array([False, False, True, False])

        h, tape = nn.mlp_forward(vparams.decoder, z[None, :])
        locs = h[:, :schema.n_items]
        flags = h[:, schema.n_items:]
        ll, _, d_locs, d_flags, d_base, d_incr = vae.ordinal_batch_loglik(
            schema, vparams, locs, flags, levels[None, :], missing[None, :],
            cannot[None, :], with_grad=True)
        dec_grads, g_z = nn.mlp_backward(vparams.decoder, tape,
                                         np.concatenate([d_locs, d_flags], axis=1))

        # gradient w.r.t. z
        step = 1e-6
        for i in range(2):
            e = np.zeros(2)
            e[i] = step
            fp = self._ll(schema, vparams, z + e, levels, missing, cannot)
            fm = self._ll(schema, vparams, z - e, levels, missing, cannot)
            fd = (fp - fm) / (2 * step)
            assert g_z[0, i] == pytest.approx(fd, rel=1e-5, abs=1e-8)

        # gradient w.r.t. decoder network parameters
        def f(dec):
            vp = vae.VaeParams(vparams.encoder, dec, vparams.cut_base, vparams.cut_incr)
            return self._ll(schema, vp, z, levels, missing, cannot)

        fd = nn.finite_diff_grad(f, vparams.decoder, 1e-6)
        for a, b in zip(dec_grads.arrays(), fd.arrays()):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)

        # gradient w.r.t. cutpoint parameters
        def g(arrs):
            vp = vae.VaeParams(vparams.encoder, vparams.decoder, arrs[0], tuple(arrs[1:]))
            return self._ll(schema, vp, z, levels, missing, cannot)

        arrs = [vparams.cut_base.copy()] + [a.copy() for a in vparams.cut_incr]
        fd_cut = nn.finite_diff_arrays(g, arrs, 1e-6)
        np.testing.assert_allclose(d_base, fd_cut[0], rtol=1e-5, atol=1e-7)
        for a, b in zip(d_incr, fd_cut[1:]):
            np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-7)


class TestExpectedScores:
    def test_bounded_by_max(self, schema, vparams):
        rng = np.random.default_rng(10)
        for _ in range(50):
            out = vae.decode_ordinal(schema, vparams, rng.standard_normal(2) * 3)
            e = vae.expected_scores(out)
            for j, item in enumerate(schema.items):
                assert 0.0 <= e[j] <= item.levels - 1

    def test_flag_scales_expectation(self):
        schema = InstrumentSchema("f", (ItemSpec(3, has_flag=True),))
        params = vae.init_vae(schema, 1, (2,), np.random.default_rng(1))
        out = vae.decode_ordinal(schema, params, np.zeros(1))
        p_perform = 1.0 - expit(out.flag_logits[0])
        raw = float(np.arange(3) @ vae.item_probs(out, 0))
        assert vae.expected_scores(out)[0] == pytest.approx(raw * p_perform)
