"""Invariant battery run by ``mf check`` on any parameter vector.

Every check here holds for arbitrary weights, so a freshly initialized net
must pass all of them.
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .evaluate import GridQuadrature
from .geometry import FlatTorus
from .model import MoserModel
from .net import check_finite


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def __post_init__(self):
        self.passed = bool(self.passed)
        self.value = float(self.value)
        self.tolerance = float(self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.1e}) {self.detail}".rstrip()


def relative_error(a, b, floor):
    """Elementwise ``|a - b| / max(|b|, floor)``."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)


def fd_divergence(net, x, h=1e-4):
    """Central finite-difference divergence of ``net.field_u`` at rows of ``x``."""
    x = np.asarray(x, dtype=float)
    total = np.zeros(len(x))
    for i in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[i] = h
        plus = ad.value(net.field_u(x + e))[:, i]
        minus = ad.value(net.field_u(x - e))[:, i]
        total += (plus - minus) / (2 * h)
    return total


def check_normalization(model, res, tol):
    grid = GridQuadrature(model.geometry, res)
    total = grid.integrate(model.density(grid.points).mu_bar)
    err = abs(total - 1.0)
    return CheckResult("normalization", err <= tol, err, tol, f"integral {total:.9f}")


def check_divergence(net, rng, n=20, h=1e-4, tol=1e-5):
    x = net.geometry.sample_uniform(rng, n)
    exact = ad.value(net.divergence_u(x)).astype(float)
    fd = fd_divergence(net, x, h)
    # relative to the sample's divergence scale; pointwise ratios blow up where div u = 0
    floor = max(float(np.abs(fd).max()), 1e-12)
    err = float(relative_error(exact, fd, floor).max())
    return CheckResult("divergence_fd", err <= tol, err, tol)


def check_tangency(net, rng, n=100, tol=1e-10):
    geom = net.geometry
    x = geom.sample_uniform(rng, n)
    u = ad.value(net.field_u(x)).astype(float)
    scale = max(1.0, float(np.abs(u).max()))
    if isinstance(geom, FlatTorus):
        shifted = ad.value(net.field_u(x + np.array([2.0, -2.0]))).astype(float)
        err = float(np.abs(shifted - u).max()) / scale
        return CheckResult("periodicity", err <= tol, err, tol)
    err = float(np.abs(np.sum(u * geom.normal(x), axis=-1)).max()) / scale
    return CheckResult("tangency", err <= tol, err, tol)


def check_gradient(model, rng, n_coords=12, batch=16, h=1e-6, tol=1e-3):
    geom = model.geometry
    data = geom.sample_uniform(rng, batch)
    uniform = geom.sample_uniform(rng, batch)
    _, grad = model.loss_and_grad(data, uniform)
    theta = model.net.theta
    idx = rng.choice(theta.size, size=min(n_coords, theta.size), replace=False)
    worst = 0.0
    for j in idx:
        if abs(grad[j]) <= 1e-8:
            continue
        vals = []
        for sign in (1.0, -1.0):
            t = theta.copy()
            t[j] += sign * h
            other = MoserModel(model.net.with_theta(t), model.epsilon, model.lambda_minus,
                               model.lambda_plus, model.unnormalized)
            vals.append(float(ad.value(other.loss(data, uniform))))
        fd = (vals[0] - vals[1]) / (2 * h)
        worst = max(worst, abs(grad[j] - fd) / max(abs(fd), abs(grad[j])))
    return CheckResult("gradient_fd", worst <= tol, worst, tol, f"{len(idx)} coordinates")


def run_battery(model, seed=0, grid_res=256, norm_tol=1e-2):
    """Finite weights first; the numeric checks only run on a finite net."""
    check_finite(model.net.theta)
    net = model.net
    if net.dtype != np.float64:
        net = net.with_theta(net.theta)
        net.dtype = np.dtype(np.float64)
        model = MoserModel(net, model.epsilon, model.lambda_minus, model.lambda_plus,
                           model.unnormalized)
    rng = np.random.default_rng(seed)
    return [
        CheckResult("finite_params", True, 0.0, 0.0),
        check_normalization(model, grid_res, norm_tol),
        check_divergence(net, rng),
        check_tangency(net, rng),
        check_gradient(model, rng),
    ]
