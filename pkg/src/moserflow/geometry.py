"""Manifolds: the flat torus, the unit sphere and SDF-defined surfaces.

Points are stored row-wise, ``x.shape == (N, d)``.  The ``*_generic`` methods
are written with :mod:`moserflow.ad` operations so they can sit inside a
differentiated computation; all other methods take and return ndarrays.
"""

from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import InvalidValue, NearSingularProjection

SPHERE_MIN_NORM = 1e-8


def _rows(x):
    x = np.asarray(x, dtype=float)
    return x[None, :] if x.ndim == 1 else x


def _squeeze_like(out, x):
    return out[0] if np.ndim(x) == 1 else out


def wrap(x):
    """Map coordinates into the fundamental domain [-1, 1) (period 2)."""
    x = np.asarray(x, dtype=float)
    y = x - 2.0 * np.floor((x + 1.0) / 2.0)
    # floor((x+1)/2) can round across an integer for x a hair below 1
    y = np.where(y >= 1.0, y - 2.0, y)
    return np.where(y < -1.0, y + 2.0, y)


class Geometry:
    kind: str
    intrinsic_dim: int
    ambient_dim: int

    @property
    def volume(self):
        raise NotImplementedError

    def project(self, x):
        raise NotImplementedError

    def tangent_projector(self, x):
        """(N, d, d) stack of orthogonal projectors onto the tangent spaces."""
        n = self.normal(_rows(x))
        eye = np.eye(self.ambient_dim)
        P = eye[None] - n[:, :, None] * n[:, None, :]
        return _squeeze_like(P, x)

    def linearized_project(self, base, x):
        """First-order expansion of ``project`` around the on-manifold ``base``."""
        b, xx = _rows(base), _rows(x)
        n = self.normal(b)
        delta = xx - b
        out = b + delta - n * np.sum(n * delta, axis=-1, keepdims=True)
        return _squeeze_like(out, x)

    def manifold_error(self, x):
        """Per-point distance-like residual from the manifold (0 on it)."""
        raise NotImplementedError

    def sample_uniform(self, rng, count):
        raise NotImplementedError

    def describe(self):
        return {"manifold": self.kind}


@dataclass(frozen=True)
class FlatTorus(Geometry):
    """[-1, 1]^2 with opposite edges identified."""

    kind = "flat_torus"
    intrinsic_dim = 2
    ambient_dim = 2

    @property
    def volume(self):
        return 4.0

    def project(self, x):
        return wrap(x)

    def tangent_projector(self, x):
        xx = _rows(x)
        P = np.broadcast_to(np.eye(2), (len(xx), 2, 2)).copy()
        return _squeeze_like(P, x)

    def linearized_project(self, base, x):
        return np.array(x, dtype=float, copy=True)

    def manifold_error(self, x):
        x = _rows(x)
        outside = np.maximum(0.0, -1.0 - x) + np.maximum(0.0, x - 1.0)
        return outside.max(axis=-1)

    def sample_uniform(self, rng, count):
        return rng.uniform(-1.0, 1.0, size=(count, 2))


@dataclass(frozen=True)
class Sphere(Geometry):
    """The unit sphere in R^3."""

    kind = "sphere"
    intrinsic_dim = 2
    ambient_dim = 3

    @property
    def volume(self):
        return 4.0 * np.pi

    def _check(self, x):
        norms = np.linalg.norm(ad.value(x), axis=-1)
        if np.any(~np.isfinite(norms)) or np.any(norms <= SPHERE_MIN_NORM):
            raise NearSingularProjection(
                f"sphere projection needs |x| > {SPHERE_MIN_NORM:g}; got min {norms.min():.3g}"
            )

    def project(self, x):
        xx = _rows(x)
        self._check(xx)
        out = xx / np.linalg.norm(xx, axis=-1, keepdims=True)
        return _squeeze_like(out, x)

    def normal(self, x):
        return self.project(x)

    def project_generic(self, x):
        self._check(x)
        return x / ad.sqrt(ad.dot(x, x, keepdims=True))

    def normal_generic(self, p):
        return p / ad.sqrt(ad.dot(p, p, keepdims=True))

    def manifold_error(self, x):
        return np.abs(np.linalg.norm(_rows(x), axis=-1) - 1.0)

    def sample_uniform(self, rng, count):
        g = rng.standard_normal(size=(count, 3))
        return g / np.linalg.norm(g, axis=-1, keepdims=True)


@dataclass(frozen=True)
class TorusSdf:
    """Exact signed distance to a torus of revolution about the z axis."""

    R: float = 1.0
    r: float = 0.4

    def __post_init__(self):
        if not (self.R > 0 and self.r > 0 and self.R > 1.5 * self.r):
            raise InvalidValue(
                f"implicit_torus needs R > 1.5 r > 0 (got R={self.R}, r={self.r})"
            )

    name = "implicit_torus"

    @property
    def area(self):
        return 4.0 * np.pi ** 2 * self.R * self.r

    @property
    def band(self):
        return 0.5 * self.r

    def value(self, x):
        rho = ad.sqrt(x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1])
        z = x[..., 2]
        return ad.sqrt((rho - self.R) * (rho - self.R) + z * z) - self.r

    def grad(self, x):
        rho = ad.sqrt(x[..., 0] * x[..., 0] + x[..., 1] * x[..., 1])
        z = x[..., 2]
        q = ad.sqrt((rho - self.R) * (rho - self.R) + z * z)
        radial = (rho - self.R) / (q * rho)
        return ad.stack([radial * x[..., 0], radial * x[..., 1], z / q], axis=-1)

    def check(self, x):
        xv = ad.value(x)
        rho = np.hypot(xv[..., 0], xv[..., 1])
        f = np.sqrt((rho - self.R) ** 2 + xv[..., 2] ** 2) - self.r
        bad = ~np.isfinite(f) | (np.abs(f) >= self.band) | (rho <= 1e-8)
        if np.any(bad):
            raise NearSingularProjection(
                f"point outside the SDF validity band |f| < {self.band:g}"
            )

    def chart(self, theta, phi):
        """Surface point for tube angle ``theta`` and axial angle ``phi``."""
        ring = self.R + self.r * np.cos(theta)
        return np.stack(
            [ring * np.cos(phi), ring * np.sin(phi), self.r * np.sin(theta)], axis=-1
        )

    def angles(self, x):
        x = _rows(x)
        rho = np.hypot(x[:, 0], x[:, 1])
        theta = np.arctan2(x[:, 2], rho - self.R)
        phi = np.arctan2(x[:, 1], x[:, 0])
        return theta, phi

    def sample(self, rng, count):
        # tube angle by rejection against the area factor R + r cos(theta)
        out = np.empty(count)
        filled = 0
        while filled < count:
            need = count - filled
            theta = rng.uniform(-np.pi, np.pi, size=2 * need + 16)
            accept = rng.uniform(0.0, 1.0, size=theta.shape) * (self.R + self.r) < (
                self.R + self.r * np.cos(theta)
            )
            got = theta[accept][:need]
            out[filled : filled + len(got)] = got
            filled += len(got)
        phi = rng.uniform(-np.pi, np.pi, size=count)
        return self.chart(out, phi)


@dataclass(frozen=True)
class SphereSdf:
    """``f(x) = |x| - 1``; the unit sphere as an implicit surface."""

    name = "sphere_sdf"

    @property
    def area(self):
        return 4.0 * np.pi

    @property
    def band(self):
        return 0.5

    def value(self, x):
        return ad.sqrt(ad.dot(x, x)) - 1.0

    def grad(self, x):
        return x / ad.sqrt(ad.dot(x, x, keepdims=True))

    def check(self, x):
        f = np.linalg.norm(ad.value(x), axis=-1) - 1.0
        if np.any(~np.isfinite(f)) or np.any(np.abs(f) >= self.band):
            raise NearSingularProjection("point outside the SDF validity band |f| < 0.5")

    def sample(self, rng, count):
        return Sphere().sample_uniform(rng, count)


@dataclass(frozen=True)
class ImplicitSurface(Geometry):
    """Zero level set of an exact SDF; projection ``x - f(x) grad f(x)``."""

    sdf: object = TorusSdf()

    intrinsic_dim = 2
    ambient_dim = 3

    @property
    def kind(self):
        return self.sdf.name

    @property
    def volume(self):
        return self.sdf.area

    def project(self, x):
        xx = _rows(x)
        self.sdf.check(xx)
        f = self.sdf.value(xx)
        out = xx - f[:, None] * self.sdf.grad(xx)
        return _squeeze_like(out, x)

    def normal(self, x):
        xx = _rows(x)
        self.sdf.check(xx)
        return _squeeze_like(self.sdf.grad(xx), x)

    def project_generic(self, x):
        self.sdf.check(x)
        f = self.sdf.value(x)
        return x - ad.reshape(f, np.shape(ad.value(f)) + (1,)) * self.sdf.grad(x)

    def normal_generic(self, p):
        return self.sdf.grad(p)

    def manifold_error(self, x):
        return np.abs(self.sdf.value(_rows(x)))

    def sample_uniform(self, rng, count):
        return self.sdf.sample(rng, count)

    def describe(self):
        out = {"manifold": self.kind}
        if isinstance(self.sdf, TorusSdf):
            out.update({"implicit_torus.R": self.sdf.R, "implicit_torus.r": self.sdf.r})
        return out


def make_geometry(manifold, R=1.0, r=0.4):
    if manifold == "flat_torus":
        return FlatTorus()
    if manifold == "sphere":
        return Sphere()
    if manifold == "implicit_torus":
        return ImplicitSurface(TorusSdf(float(R), float(r)))
    if manifold == "sphere_sdf":
        return ImplicitSurface(SphereSdf())
    raise InvalidValue(f"manifold must be flat_torus, sphere or implicit_torus; got {manifold!r}")
