"""Acceptance criteria, one test per criterion.

Each test prints a single PASS/FAIL line with the measured value and the
pinned tolerance; the lines are repeated in the terminal summary.  The
long training runs are shared through module fixtures so that criteria 6
and 10 reuse the model and timings of criterion 5.
"""

import time

import numpy as np
import pytest

from moserflow import ad
from moserflow.checks import fd_divergence
from moserflow.data import (Dataset, VmfMixtureSpec, WrappedGaussianMix, load_latlon_csv,
                            vmf_mixture)
from moserflow.evaluate import GridQuadrature, eval_nll, tv_distance
from moserflow.flow import OdeConfig, generate, pushforward_logdensity
from moserflow.geometry import FlatTorus, Sphere, make_geometry
from moserflow.model import MoserModel, generalized_kl
from moserflow.net import VectorFieldNet
from moserflow.train import TrainConfig, train

MANIFOLDS = ["flat_torus", "sphere", "implicit_torus"]


def f64_view(model):
    """Same weights evaluated in float64."""
    net = model.net.with_theta(model.net.theta)
    net.dtype = np.dtype(np.float64)
    return MoserModel(net, model.epsilon, model.lambda_minus, model.lambda_plus,
                      model.unnormalized)


def fresh_dataset(geometry, sampler, density=None):
    return Dataset(np.zeros((0, geometry.ambient_dim)), geometry, "sampler", sampler=sampler,
                   density_fn=density)


# ---------------------------------------------------------------------------
# 1-4: properties that hold for any parameters


def test_c01_normalization(verdict):
    start = time.perf_counter()
    worst = {}
    ok = True
    for name in MANIFOLDS:
        geom = make_geometry(name)
        errs = []
        for seed in range(10):
            net = VectorFieldNet.create(geom, [16, 16], seed=seed, dtype=np.float32)
            model = MoserModel(net)
            if name == "flat_torus":
                grid = GridQuadrature(geom, 2048)
                total = grid.integrate(model.density(grid.points, chunk=1 << 18).mu_bar)
                err, tol = abs(total - 1.0), 1e-3
            else:
                x = geom.sample_uniform(np.random.default_rng(100 + seed), 10**6)
                vals = geom.volume * model.density(x, chunk=1 << 18).mu_bar
                se = vals.std() / np.sqrt(len(vals))
                err, tol = abs(vals.mean() - 1.0), 3 * se
            errs.append(err / tol)
            ok &= err <= tol
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    detail = ", ".join(f"{k} worst err/tol {v:.2e}" for k, v in worst.items())
    assert verdict(1, "normalization", ok, f"{detail}; {elapsed:.0f}s (< 120s)")


def test_c02_divergence_exactness(verdict):
    start = time.perf_counter()
    errs = {}
    for i, name in enumerate(MANIFOLDS):
        net = VectorFieldNet.create(make_geometry(name), [256, 256, 256], seed=i)
        x = net.geometry.sample_uniform(np.random.default_rng(i), 100)
        exact = net.divergence_u(x)
        fd = fd_divergence(net, x, h=1e-4)
        errs[name] = float(np.max(np.abs(exact - fd)) / np.max(np.abs(fd)))
    elapsed = time.perf_counter() - start
    ok = max(errs.values()) <= 1e-5 and elapsed < 60
    detail = ", ".join(f"{k} {v:.2e}" for k, v in errs.items())
    assert verdict(2, "divergence vs finite differences", ok,
                   f"max rel err {detail} (tol 1e-5); {elapsed:.0f}s (< 60s)")


def spherical_divergence(field, theta, phi, h=2e-4):
    """Intrinsic divergence on the unit sphere in polar coordinates.

    div u = (1/sin t) d/dt(sin t u_t) + (1/sin t) d/dp u_p, with the
    derivatives taken by fourth-order central differences in (t, p).
    """
    def frame(t, p):
        x = np.stack([np.sin(t) * np.cos(p), np.sin(t) * np.sin(p), np.cos(t)], axis=-1)
        e_t = np.stack([np.cos(t) * np.cos(p), np.cos(t) * np.sin(p), -np.sin(t)], axis=-1)
        e_p = np.stack([-np.sin(p), np.cos(p), np.zeros_like(p)], axis=-1)
        return x, e_t, e_p

    def comps(t, p):
        x, e_t, e_p = frame(t, p)
        u = field(x)
        return np.sin(t) * np.sum(u * e_t, axis=-1), np.sum(u * e_p, axis=-1)

    def d4(f, s):
        return (-f(2 * s) + 8 * f(s) - 8 * f(-s) + f(-2 * s)) / (12 * h)

    d_theta = d4(lambda s: comps(theta + s, phi)[0], h)
    d_phi = d4(lambda s: comps(theta, phi + s)[1], h)
    return (d_theta + d_phi) / np.sin(theta)


def test_c03_sphere_divergence_oracle(verdict):
    start = time.perf_counter()
    net = VectorFieldNet.create(Sphere(), [256, 256, 256], seed=3)
    rng = np.random.default_rng(3)
    theta = np.arccos(rng.uniform(-0.95, 0.95, 100))  # away from the chart's poles
    phi = rng.uniform(-np.pi, np.pi, 100)
    x = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
    ambient = net.divergence_u(x)
    intrinsic = spherical_divergence(lambda p: ad.value(net.field_u(p)), theta, phi)
    err = float(np.max(np.abs(ambient - intrinsic)))
    elapsed = time.perf_counter() - start
    ok = err <= 1e-6 and elapsed < 60
    assert verdict(3, "ambient = intrinsic divergence on the sphere", ok,
                   f"max abs err {err:.2e} (tol 1e-6), |div| up to "
                   f"{np.abs(ambient).max():.2f}; {elapsed:.0f}s (< 60s)")


def test_c04_gradient(verdict):
    start = time.perf_counter()
    worst, checked, sizes = 0.0, 0, []
    for i, name in enumerate(MANIFOLDS):
        geom = make_geometry(name)
        net = VectorFieldNet.create(geom, [10, 10] if name == "flat_torus" else [10, 11],
                                    seed=i)
        sizes.append(net.spec.n_params)
        model = MoserModel(net, lambda_minus=2.0, lambda_plus=0.5)
        rng = np.random.default_rng(i)
        data, uniform = geom.sample_uniform(rng, 32), geom.sample_uniform(rng, 32)

        def loss_at(theta):
            m = MoserModel(net.with_theta(theta), model.epsilon, model.lambda_minus,
                           model.lambda_plus, model.unnormalized)
            return float(ad.value(m.loss(data, uniform)))

        _, grad = model.loss_and_grad(data, uniform)
        # h balances truncation against round-off in a loss of size ~10 at |g| ~ 1e-7
        theta, h = net.theta, 1e-5
        for j in np.flatnonzero(np.abs(grad) > 1e-8):
            e = np.zeros_like(theta)
            e[j] = h
            fd = (loss_at(theta + e) - loss_at(theta - e)) / (2 * h)
            worst = max(worst, abs(grad[j] - fd) / max(abs(fd), abs(grad[j])))
            checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-3 and max(sizes) <= 200 and elapsed < 120
    assert verdict(4, "loss gradient vs finite differences", ok,
                   f"max rel err {worst:.2e} over {checked} coordinates (tol 1e-3), "
                   f"p = {sizes}; {elapsed:.0f}s (< 120s)")


# ---------------------------------------------------------------------------
# 5, 6, 10: toy-density recovery and what it implies

TOY_CFG = TrainConfig(lr=3e-4, iters=5000, data_batch=1024, uniform_batch=1024, seed=0,
                      lr_schedule="cosine")


@pytest.fixture(scope="module")
def toy_run():
    geom = FlatTorus()
    mix = WrappedGaussianMix()
    net = VectorFieldNet.create(geom, [256, 256, 256], posenc_k=1, seed=0, dtype=np.float32)
    model = MoserModel(net, lambda_minus=2.0)
    start = time.perf_counter()
    result = train(model, fresh_dataset(geom, mix.sample, mix.density), TOY_CFG)
    return {"model": model, "mix": mix, "result": result,
            "train_s": time.perf_counter() - start}


def test_c05_toy_density_recovery(toy_run, verdict):
    model, mix = f64_view(toy_run["model"]), toy_run["mix"]
    grid = GridQuadrature(FlatTorus(), 1024)
    kl = generalized_kl(mix.density(grid.points), model.density(grid.points).mu_plus,
                        grid.weights)
    secs = toy_run["train_s"]
    ok = kl < 0.05 and secs < 600
    assert verdict(5, "toy density recovery", ok,
                   f"generalized KL {kl:.4f} nats (< 0.05), training {secs:.0f}s (< 600s)")


def test_toy_run_loss_decreases(toy_run):
    total = np.array([row["total"] for row in toy_run["result"].metrics])
    assert np.median(total[4500:5000]) < np.median(total[:500])


def test_c06_generator_consistency(toy_run, verdict):
    model = toy_run["model"]
    start = time.perf_counter()
    n = 10**5
    z = FlatTorus().sample_uniform(np.random.default_rng(1), n)
    x = generate(model, z, OdeConfig("rk4", steps=24, chunk=8192))
    grid = GridQuadrature(FlatTorus(), 50)
    q = grid.mass(f64_view(model).density(grid.points).mu_plus)
    tv = tv_distance(grid.histogram(x), q)
    elapsed = time.perf_counter() - start
    # the same number of exact draws from q, to show the sampling-noise level
    exact = np.random.default_rng(2).multinomial(n, (q / q.sum()).ravel()).reshape(q.shape)
    noise = tv_distance(exact.astype(float), q)
    ok = tv < 0.05 and elapsed < 300
    assert verdict(6, "generated samples match mu_plus", ok,
                   f"TV {tv:.4f} (< 0.05) from 1e5 samples, exact draws give {noise:.4f}; "
                   f"{elapsed:.0f}s (< 300s)")


def test_c10_iteration_time_flat(toy_run, verdict):
    times = toy_run["result"].iter_times
    it = np.arange(len(times))
    slope = np.polyfit(it, times, 1)[0]
    drift = abs(slope) * len(times)
    ok = drift < 0.1 * times.mean()
    assert verdict(10, "per-iteration time is flat", ok,
                   f"|slope| * iters = {drift * 1e3:.2f} ms vs 10% of mean "
                   f"{0.1 * times.mean() * 1e3:.2f} ms")


# ---------------------------------------------------------------------------
# 7: larger lambda_minus brings mu_plus closer to the generated density


LAMBDAS = (1.0, 2.0, 10.0, 100.0)


def test_c07_lambda_monotonicity(verdict):
    start = time.perf_counter()
    geom, mix = FlatTorus(), WrappedGaussianMix()
    data = fresh_dataset(geom, mix.sample, mix.density)
    cfg = TrainConfig(lr=3e-4, iters=1500, data_batch=1024, uniform_batch=1024, seed=0,
                      lr_schedule="cosine")
    grid = GridQuadrature(geom, 32)
    # the floor clock keeps the backward solve non-stiff where mu_bar is clamped
    ode = OdeConfig("dopri5", rtol=1e-5, atol=1e-7, clock="floor")
    gaps = []
    for lam in LAMBDAS:
        net = VectorFieldNet.create(geom, [64, 64, 64], seed=0, dtype=np.float32)
        model = MoserModel(net, epsilon=0.1 / geom.volume, lambda_minus=lam)
        train(model, data, cfg)
        model = f64_view(model)
        logp = pushforward_logdensity(model, grid.points, ode)
        gaps.append(float(np.mean(np.abs(np.exp(logp) - model.density(grid.points).mu_plus))))
    elapsed = time.perf_counter() - start
    ok = all(b <= 1.1 * a for a, b in zip(gaps, gaps[1:])) and elapsed < 2700
    detail = ", ".join(f"{lam:g}: {g:.2e}" for lam, g in zip(LAMBDAS, gaps))
    assert verdict(7, "lambda_minus monotonicity", ok,
                   f"mean |pushforward - mu_plus| by lambda_minus {detail} "
                   f"(each <= 1.1x previous); {elapsed:.0f}s (< 2700s)")


# ---------------------------------------------------------------------------
# 8: the uniform prior is the loss minimizer


def test_c08_uniform_target(verdict):
    start = time.perf_counter()
    geom = FlatTorus()
    net = VectorFieldNet.create(geom, [64, 64, 64], seed=0, dtype=np.float32)
    model = MoserModel(net, lambda_minus=2.0)
    cfg = TrainConfig(lr=1e-3, iters=1000, data_batch=1024, uniform_batch=1024, seed=0,
                      lr_schedule="cosine")
    rng = np.random.default_rng(8)

    def big_batch_loss():
        batch = geom.sample_uniform(rng, 10**5), geom.sample_uniform(rng, 10**5)
        return float(ad.value(f64_view(model).loss(*batch)))

    before = big_batch_loss()
    train(model, fresh_dataset(geom, geom.sample_uniform), cfg)
    after = big_batch_loss()
    elapsed = time.perf_counter() - start
    gap = after - np.log(geom.volume)
    ok = abs(gap) < 0.02 and elapsed < 300
    assert verdict(8, "uniform target minimizes the loss", ok,
                   f"loss {before:.4f} -> {after:.4f}, log 4 = {np.log(4):.4f}, "
                   f"gap {gap:+.4f} (|gap| < 0.02); {elapsed:.0f}s (< 300s)")


# ---------------------------------------------------------------------------
# 9: sphere NLL against a vMF mixture


VMF2 = VmfMixtureSpec([{"mean": [0, 0, 1], "kappa": 10.0, "weight": 0.5},
                       {"mean": [1, 0, 0], "kappa": 10.0, "weight": 0.5}])


def test_c09_sphere_vmf_nll(verdict):
    start = time.perf_counter()
    ds = vmf_mixture(VMF2, np.random.default_rng(0), 60000).split(50000 / 60000, seed=0)
    oracle = VMF2.cross_entropy(np.random.default_rng(1))
    net = VectorFieldNet.create(Sphere(), [128] * 6, seed=0, dtype=np.float32)
    model = MoserModel(net, lambda_minus=2.0)
    cfg = TrainConfig(lr=3e-4, iters=4000, data_batch=1024, uniform_batch=1024, seed=0,
                      lr_schedule="cosine")
    train(model, ds, cfg)
    nll = eval_nll(f64_view(model), ds.test_points())
    elapsed = time.perf_counter() - start
    ok = abs(nll - oracle) < 0.1 and len(ds.train_points()) == 50000 and elapsed < 1200
    assert verdict(9, "sphere vMF-mixture NLL", ok,
                   f"test NLL {nll:.4f} vs oracle {oracle:.4f}, |diff| {abs(nll - oracle):.4f} "
                   f"(< 0.1) on {len(ds.test_points())} held-out points; "
                   f"{elapsed:.0f}s (< 1200s)")


# ---------------------------------------------------------------------------
# 11: earth-data ingestion contract

EARTH_SIZES = {"volcano": 829, "earthquake": 6124, "flood": 4877, "fire": 12810}


def test_c11_earth_ingestion(tmp_path, verdict):
    rng = np.random.default_rng(11)
    ok, parts = True, []
    for name, n in EARTH_SIZES.items():
        lat = rng.uniform(-90, 90, n)
        lon = rng.uniform(-180, 180, n)
        lat[:4] = [90, -90, 0, 45.5]  # range edges are legal
        lon[:4] = [180, -180, 0, -0.25]
        path = tmp_path / f"{name}.csv"
        with open(path, "w") as fh:
            fh.write("id,lat,lon,mag\n")
            for i in range(n):
                fh.write(f"{i},{lat[i]:.6f},{lon[i]:.6f},{rng.uniform(0, 9):.1f}\n")
        ds = load_latlon_csv(path, 0.8, seed=0)
        norm_err = float(np.abs(np.linalg.norm(ds.points, axis=1) - 1).max())
        count_ok = len(ds) == n and len(ds.train_idx) + len(ds.test_idx) == n
        ok &= count_ok and norm_err < 1e-12
        parts.append(f"{name} {len(ds)}/{n}")
    assert verdict(11, "earth-data ingestion", ok,
                   ", ".join(parts) + "; unit norm within 1e-12")
