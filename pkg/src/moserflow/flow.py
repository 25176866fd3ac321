"""Sample generation and push-forward densities by integrating the Moser flow.

The velocity at time t is ``u / ((1 - t) nu + t mu_plus)``.  Using the
clamped ``mu_plus`` keeps the denominator above ``min(nu, eps)`` even when
the learned density dips below zero somewhere.
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import InvalidValue, StepSizeUnderflow
from .geometry import FlatTorus


@dataclass
class OdeConfig:
    method: str = "rk4"  # "rk4" or "dopri5"
    steps: int = 200
    rtol: float = 1e-5
    atol: float = 1e-7
    max_steps: int = 100000
    chunk: int = 16384
    clock: str = "linear"  # "linear" integrates in t, "floor" in the time-changed s

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise InvalidValue(f"ode method must be rk4 or dopri5, got {self.method!r}")
        if self.clock not in ("linear", "floor"):
            raise InvalidValue(f"ode clock must be linear or floor, got {self.clock!r}")
        if self.method == "rk4" and self.steps < 16:
            raise InvalidValue("fixed-step integration needs steps >= 16")


def moser_velocity(u, nu, mu_plus, t):
    """``u / ((1-t) nu + t mu_plus)`` row-wise; works for any ad type."""
    alpha = (1.0 - t) * nu + t * mu_plus
    return u / ad.reshape(alpha, np.shape(ad.value(alpha)) + (1,))


def velocity(model, t, x):
    """Moser velocity of ``model`` at rows of ``x`` (internal units cancel)."""
    u, _, mu_plus = model.internal_field_density(x)
    return moser_velocity(u, model.scale * model.prior, mu_plus, t)


def extended_velocity_divergence(model, t, y):
    """``(v_t(y), div_E v~_t(y))`` with ``v~_t = v_t o pi``.

    On submanifolds the extension through the closest-point projection is
    constant along normals, so its ambient divergence is the intrinsic one.
    On the torus the velocity is already periodic and no extension is needed.
    """
    geom = model.geometry
    if isinstance(geom, FlatTorus):
        fn = lambda z: velocity(model, t, z)  # noqa: E731
    else:
        fn = lambda z: velocity(model, t, geom.project_generic(z))  # noqa: E731
    return ad.jacobian_trace(fn, y)


def retract(geom, x):
    return geom.project(x)


# ---------------------------------------------------------------------------
# integrators; ``f(t, y)`` and ``post(y)`` act on (N, k) arrays


def rk4(f, y0, t0, t1, steps, post=None, record=None):
    y = np.array(y0, dtype=float)
    h = (t1 - t0) / steps
    for i in range(steps):
        t = t0 + i * h
        k1 = f(t, y)
        k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
        k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
        k4 = f(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if post is not None:
            y = post(y)
        if record is not None:
            record.append(y.copy())
    return y


# Dormand-Prince 5(4) tableau
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])


def dopri5(f, y0, t0, t1, rtol, atol, post=None, record=None, max_steps=100000):
    y = np.array(y0, dtype=float)
    span = t1 - t0
    direction = np.sign(span)
    t = t0

    def err_norm(e, ya, yb):
        scale = atol + rtol * np.maximum(np.abs(ya), np.abs(yb))
        return np.sqrt(np.mean((e / scale) ** 2))

    # initial step (Hairer, Norsett & Wanner, II.4)
    k0 = f(t, y)
    d0 = err_norm(y, y, y)
    d1 = err_norm(k0, y, y)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    k1 = f(t + direction * h0, y + direction * h0 * k0)
    d2 = err_norm(k1 - k0, y, y) / h0
    h1 = max(1e-6, h0 * 1e-3) if max(d1, d2) <= 1e-15 else (0.01 / max(d1, d2)) ** 0.2
    h = min(100 * h0, h1, abs(span))

    steps = 0
    while direction * (t1 - t) > 0:
        if steps >= max_steps:
            raise StepSizeUnderflow(f"adaptive solver exceeded {max_steps} steps")
        if h < 1e-12 * max(1.0, abs(span)):
            raise StepSizeUnderflow(f"step size underflow at t={t:.6g}")
        h = min(h, abs(t1 - t))
        hs = direction * h
        ks = [k0]
        for i in range(1, 7):
            yi = y + hs * sum(a * k for a, k in zip(_A[i], ks))
            ks.append(f(t + _C[i] * hs, yi))
        y5 = y + hs * sum(b * k for b, k in zip(_B5, ks) if b != 0.0)
        err = hs * sum((b5 - b4) * k for b5, b4, k in zip(_B5, _B4, ks))
        e = err_norm(err, y, y5)
        steps += 1
        if e <= 1.0:
            t = t + hs
            y = y5 if post is None else post(y5)
            if record is not None:
                record.append(y.copy())
            k0 = ks[6] if post is None else f(t, y)
        factor = 10.0 if e == 0 else min(10.0, max(0.2, 0.9 * e ** -0.2))
        h = h * factor
    return y


def _solve(f, y0, t0, t1, ode, post=None, record=None):
    if ode.method == "rk4":
        return rk4(f, y0, t0, t1, ode.steps, post, record)
    return dopri5(f, y0, t0, t1, ode.rtol, ode.atol, post, record, ode.max_steps)


class FloorClock:
    """Time change ``dt/ds = (1 - t) nu + t eps``.

    The right side is a lower bound on the velocity denominator, so in ``s``
    the field is bounded by ``|u|``.  Where ``mu_bar`` is clamped to ``eps``
    the velocity in ``t`` grows like ``u / eps`` near t=1; in ``s`` that
    boundary layer is stretched over ``log(nu / eps) / (nu - eps)`` units.
    """

    def __init__(self, nu, eps):
        self.nu, self.rate = nu, nu - eps
        self.s_end = np.log(nu / eps) / self.rate

    def t(self, s):
        return self.nu / self.rate * -np.expm1(-self.rate * s)

    def s(self, t):
        return -np.log1p(-self.rate * t / self.nu) / self.rate

    def dt_ds(self, t):
        return self.nu - self.rate * t


def _integrate(f, y0, t0, t1, ode, post=None, record=None, model=None):
    if ode.clock == "linear" or model is None:
        return _solve(f, y0, t0, t1, ode, post, record)
    clock = FloorClock(model.scale * model.prior, model.scale * model.epsilon)

    def g(s, y):
        t = clock.t(s)
        return clock.dt_ds(t) * f(t, y)

    s0 = 0.0 if t0 == 0 else clock.s_end
    s1 = 0.0 if t1 == 0 else clock.s_end
    return _solve(g, y0, s0, s1, ode, post, record)


# ---------------------------------------------------------------------------


def generate(model, z, ode=None, record=None):
    """Push prior samples ``z`` through the flow from t=0 to t=1."""
    ode = ode or OdeConfig()
    geom = model.geometry
    z = np.atleast_2d(np.asarray(z, dtype=float))
    out = []
    for i in range(0, len(z), ode.chunk):
        rec = [] if record is not None else None
        y = _integrate(lambda t, x: velocity(model, t, x), z[i : i + ode.chunk], 0.0, 1.0,
                       ode, post=lambda x: retract(geom, x), record=rec, model=model)
        if record is not None:
            record.extend(rec)
        out.append(y)
    return np.concatenate(out) if out else z.copy()


def inverse(model, x, ode=None):
    """Integrate the flow backward from t=1 to t=0."""
    ode = ode or OdeConfig()
    geom = model.geometry
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return _integrate(lambda t, y: velocity(model, t, y), x, 1.0, 0.0, ode,
                      post=lambda y: retract(geom, y), model=model)


def pushforward_logdensity(model, x, ode=None, return_z=False):
    """log of the density generated by the flow, at points ``x``.

    Runs the trajectory from t=1 back to t=0 while accumulating the
    divergence of the velocity, then adds the prior log-density at the end
    point.
    """
    ode = ode or OdeConfig()
    geom = model.geometry
    d = geom.ambient_dim
    x = np.atleast_2d(np.asarray(x, dtype=float))

    def f(t, state):
        v, div = extended_velocity_divergence(model, t, state[:, :d])
        return np.concatenate([ad.value(v), ad.value(div)[:, None]], axis=1)

    def post(state):
        state = state.copy()
        state[:, :d] = retract(geom, state[:, :d])
        return state

    logp, zs = [], []
    for i in range(0, len(x), ode.chunk):
        xc = x[i : i + ode.chunk]
        state = np.concatenate([xc, np.zeros((len(xc), 1))], axis=1)
        end = _integrate(f, state, 1.0, 0.0, ode, post=post, model=model)
        logp.append(-np.log(geom.volume) + end[:, d])
        zs.append(end[:, :d])
    logp = np.concatenate(logp)
    return (logp, np.concatenate(zs)) if return_z else logp
