"""Model density ``mu_bar = nu - div(u)``, its clamped split, and the losses."""

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import EmptyBatch, InvalidValue, NonPositiveDensity
from .geometry import ImplicitSurface
from .net import grad_scalar_wrt_params


@dataclass
class DensityTriple:
    mu_bar: np.ndarray
    mu_plus: np.ndarray
    mu_minus: np.ndarray


def split_density(mu_bar, eps):
    """``(max(eps, mu_bar), eps - min(eps, mu_bar))`` for any ad type."""
    return ad.clamp_min(mu_bar, eps), eps - ad.clamp_max(mu_bar, eps)


class MoserModel:
    """Uniform prior, neural field, and the loss hyper-parameters.

    With ``unnormalized`` the network output is read as ``vol * u`` and the
    prior as the constant 1, so internal densities are ``vol`` times the true
    ones.  Everything returned to callers is in true units.
    """

    def __init__(self, net, epsilon=None, lambda_minus=1.0, lambda_plus=0.0,
                 unnormalized=None):
        self.net = net
        vol = self.geometry.volume
        self.epsilon = 1e-5 / vol if epsilon is None else float(epsilon)
        self.lambda_minus = float(lambda_minus)
        self.lambda_plus = float(lambda_plus)
        if unnormalized is None:
            unnormalized = isinstance(self.geometry, ImplicitSurface)
        self.unnormalized = bool(unnormalized)
        if self.lambda_minus < 0 or self.lambda_plus < 0:
            raise InvalidValue("lambda_minus and lambda_plus must be nonnegative")
        if self.lambda_minus + self.lambda_plus < 1:
            raise InvalidValue("lambda_minus + lambda_plus >= 1 is required")
        if not 0 < self.epsilon < 1.0 / vol:
            raise InvalidValue(f"epsilon must lie in (0, 1/vol) = (0, {1.0 / vol:.6g})")

    @property
    def geometry(self):
        return self.net.geometry

    @property
    def volume(self):
        return self.geometry.volume

    @property
    def scale(self):
        """Factor between internal and true densities."""
        return self.volume if self.unnormalized else 1.0

    @property
    def prior(self):
        return 1.0 / self.volume

    # internal-unit quantities (ad-generic) ---------------------------------

    def internal_field_density(self, x, params=None):
        """``(u, mu_bar, mu_plus)`` in internal units, generic in ``x``."""
        u, div = self.net.field_and_divergence(x, params)
        mu_bar = self.scale * self.prior - div
        return u, mu_bar, ad.clamp_min(mu_bar, self.scale * self.epsilon)

    def internal_mu_bar(self, x, params=None):
        return self.scale * self.prior - self.net.divergence_u(x, params)

    # public API ------------------------------------------------------------

    def density(self, x, chunk=65536):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        parts = [self.internal_mu_bar(x[i : i + chunk]) for i in range(0, len(x), chunk)]
        mu_bar = np.concatenate(parts).astype(float) / self.scale if parts else np.zeros(0)
        plus, minus = split_density(mu_bar, self.epsilon)
        return DensityTriple(mu_bar, plus, minus)

    def loss_terms(self, data, uniform, params=None):
        """(nll, penalty_minus, penalty_plus) as ad values."""
        if len(data) == 0 or len(uniform) == 0:
            raise EmptyBatch("data and uniform batches must be nonempty")
        eps = self.scale * self.epsilon
        m = len(data)
        both = np.concatenate([np.asarray(data, float), np.asarray(uniform, float)])
        mu_bar = self.internal_mu_bar(both, params)
        plus, minus = split_density(mu_bar, eps)
        nll = np.log(self.scale) - ad.mean(ad.log(plus[:m]))
        weight = self.volume / self.scale
        pen_minus = self.lambda_minus * weight * ad.mean(minus[m:])
        pen_plus = self.lambda_plus * weight * ad.mean(plus[m:])
        return nll, pen_minus, pen_plus

    def loss(self, data, uniform, params=None):
        nll, pm, pp = self.loss_terms(data, uniform, params)
        return nll + pm + pp

    def loss_and_grad(self, data, uniform):
        """Loss terms as floats plus the flat gradient of their sum."""
        terms = {}

        def scalar(params):
            nll, pm, pp = self.loss_terms(data, uniform, params)
            terms.update(nll=float(ad.value(nll)), penalty_minus=float(ad.value(pm)),
                         penalty_plus=float(ad.value(pp)))
            return nll + pm + pp

        total, grad = grad_scalar_wrt_params(self.net, scalar)
        terms["total"] = total
        return terms, grad

    def generalized_kl(self, target_density_fn, points, weights):
        """Quadrature estimate of D(mu, mu_plus) = int mu log(mu/mu_plus) - mu + mu_plus."""
        points = np.asarray(points, dtype=float)
        weights = np.asarray(weights, dtype=float)
        mu = np.asarray(target_density_fn(points), dtype=float)
        return generalized_kl(mu, self.density(points).mu_plus, weights)


def generalized_kl(f, g, weights):
    f = np.asarray(f, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any(~(f > 0)) or np.any(~(g > 0)):
        raise NonPositiveDensity("generalized KL needs strictly positive densities")
    return float(np.sum(weights * (f * np.log(f / g) - f + g)))
