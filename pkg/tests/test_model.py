import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moserflow import ad
from moserflow.errors import EmptyBatch, InvalidValue, NonPositiveDensity
from moserflow.geometry import make_geometry
from moserflow.model import MoserModel, generalized_kl, split_density
from moserflow.net import VectorFieldNet

GEOMS = ["flat_torus", "sphere", "implicit_torus"]


def model_for(name, seed=0, zero=False, **kw):
    net = VectorFieldNet.create(make_geometry(name), [16, 16], softplus_beta=10.0, seed=seed)
    if zero:
        net.set_theta(np.zeros(net.spec.n_params))
    return MoserModel(net, **kw)


class TestSplit:
    @settings(max_examples=100, deadline=None)
    @given(arrays(np.float64, (20,), elements=st.floats(-10, 10)),
           st.floats(1e-8, 1.0))
    def test_identities(self, mu_bar, eps):
        plus, minus = split_density(mu_bar, eps)
        assert np.all(plus >= eps) and np.all(minus >= 0)
        np.testing.assert_allclose(plus - minus, mu_bar, atol=1e-12)
        # at most one side is active away from the threshold
        assert np.all((plus == eps) | (minus == 0))


class TestHyperparameters:
    def test_default_epsilon(self):
        m = model_for("sphere")
        np.testing.assert_allclose(m.epsilon, 1e-5 / (4 * np.pi))

    def test_lambda_sum(self):
        with pytest.raises(InvalidValue, match=">= 1"):
            model_for("flat_torus", lambda_minus=0.5, lambda_plus=0.0)
        model_for("flat_torus", lambda_minus=0.0, lambda_plus=1.0)

    @pytest.mark.parametrize("eps", [0.0, 0.25, 1.0])
    def test_epsilon_bound(self, eps):
        with pytest.raises(InvalidValue):
            model_for("flat_torus", epsilon=eps)

    def test_unnormalized_default(self):
        assert model_for("implicit_torus").unnormalized
        assert not model_for("sphere").unnormalized


@pytest.mark.parametrize("name", GEOMS)
class TestZeroField:
    def test_density_is_prior(self, name):
        m = model_for(name, zero=True)
        x = m.geometry.sample_uniform(np.random.default_rng(0), 10)
        np.testing.assert_allclose(m.density(x).mu_bar, 1.0 / m.volume, rtol=1e-14)

    def test_loss_is_log_volume(self, name):
        m = model_for(name, zero=True, lambda_minus=2.0)
        rng = np.random.default_rng(1)
        x, y = m.geometry.sample_uniform(rng, 8), m.geometry.sample_uniform(rng, 8)
        nll, pm, pp = m.loss_terms(x, y)
        np.testing.assert_allclose(ad.value(nll), np.log(m.volume), rtol=1e-14)
        assert float(ad.value(pm)) == 0.0 and float(ad.value(pp)) == 0.0


class TestLoss:
    def test_terms_match_direct_formula(self):
        m = model_for("sphere", seed=3, lambda_minus=3.0, lambda_plus=0.5)
        rng = np.random.default_rng(2)
        x, y = m.geometry.sample_uniform(rng, 12), m.geometry.sample_uniform(rng, 15)
        dx, dy = m.density(x), m.density(y)
        nll, pm, pp = (float(ad.value(t)) for t in m.loss_terms(x, y))
        np.testing.assert_allclose(nll, -np.mean(np.log(dx.mu_plus)), rtol=1e-12)
        np.testing.assert_allclose(pm, 3.0 * 4 * np.pi * dy.mu_minus.mean(), rtol=1e-12,
                                   atol=1e-15)
        np.testing.assert_allclose(pp, 0.5 * 4 * np.pi * dy.mu_plus.mean(), rtol=1e-12)

    def test_empty_batches(self):
        m = model_for("flat_torus")
        with pytest.raises(EmptyBatch):
            m.loss_terms(np.zeros((0, 2)), np.zeros((3, 2)))
        with pytest.raises(EmptyBatch):
            m.loss_terms(np.zeros((3, 2)), np.zeros((0, 2)))

    def test_loss_and_grad_reports_terms(self):
        m = model_for("flat_torus", seed=4)
        rng = np.random.default_rng(3)
        terms, grad = m.loss_and_grad(rng.uniform(-1, 1, (8, 2)), rng.uniform(-1, 1, (8, 2)))
        assert set(terms) == {"nll", "penalty_minus", "penalty_plus", "total"}
        np.testing.assert_allclose(terms["total"],
                                   terms["nll"] + terms["penalty_minus"] + terms["penalty_plus"])
        assert grad.shape == (m.net.spec.n_params,) and grad.dtype == np.float64


class TestUnnormalized:
    @pytest.mark.parametrize("name", ["sphere", "implicit_torus"])
    def test_scaled_output_layer_is_equivalent(self, name):
        # reading the net output as vol * u: scaling the last layer by vol
        # must reproduce the normalized model exactly
        base = model_for(name, seed=5, unnormalized=False)
        net = base.net.with_theta(base.net.theta)
        W, b = net.layers[-1]
        net.layers[-1] = (W * base.volume, b * base.volume)
        scaled = MoserModel(net, unnormalized=True)
        rng = np.random.default_rng(4)
        x, y = base.geometry.sample_uniform(rng, 10), base.geometry.sample_uniform(rng, 10)
        np.testing.assert_allclose(scaled.density(x).mu_bar, base.density(x).mu_bar,
                                   rtol=1e-11, atol=1e-14)
        np.testing.assert_allclose(float(ad.value(scaled.loss(x, y))),
                                   float(ad.value(base.loss(x, y))), rtol=1e-11)


class TestGeneralizedKL:
    def test_zero_on_identical(self):
        f = np.array([0.2, 0.5, 1.3])
        assert generalized_kl(f, f, np.ones(3)) == 0.0

    def test_scaled_closed_form(self):
        # D(f, c f) = -log c - 1 + c for a normalized f
        f = np.array([0.1, 0.3, 0.6])
        w = np.ones(3)
        for c in (0.5, 2.0, 7.0):
            np.testing.assert_allclose(generalized_kl(f, c * f, w), -np.log(c) - 1 + c,
                                       rtol=1e-13)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (10,), elements=st.floats(1e-3, 10)),
           arrays(np.float64, (10,), elements=st.floats(1e-3, 10)))
    def test_nonnegative(self, f, g):
        assert generalized_kl(f, g, np.full(10, 0.1)) >= -1e-12

    def test_rejects_nonpositive(self):
        with pytest.raises(NonPositiveDensity):
            generalized_kl(np.array([1.0, 0.0]), np.ones(2), np.ones(2))
