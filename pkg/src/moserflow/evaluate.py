"""Quadrature grids, likelihood scores, rasters and histogram distances."""

import numpy as np

from .data import write_pgm
from .errors import EmptyDataset, GridMismatch, IoError
from .geometry import FlatTorus, ImplicitSurface, Sphere


class GridQuadrature:
    """Cell-centred product grid over a chart of the manifold.

    ``points`` are the cell centres (row-major in ``shape``) and ``weights``
    the cell areas, summing to the manifold volume.  Raster row 0 is the top
    of the chart: y = +1 on the torus, the north pole on the sphere.
    """

    def __init__(self, geometry, res):
        self.geometry = geometry
        res = int(res)
        if isinstance(geometry, FlatTorus):
            edges = np.linspace(-1.0, 1.0, res + 1)
            centers = 0.5 * (edges[:-1] + edges[1:])
            yy, xx = np.meshgrid(centers[::-1], centers, indexing="ij")
            self.points = np.stack([xx.ravel(), yy.ravel()], axis=-1)
            self.weights = np.full(res * res, 4.0 / (res * res))
            self.shape = (res, res)
        elif isinstance(geometry, Sphere):
            lat_edges = np.linspace(np.pi / 2, -np.pi / 2, res + 1)
            lon_edges = np.linspace(-np.pi, np.pi, 2 * res + 1)
            lat = 0.5 * (lat_edges[:-1] + lat_edges[1:])
            lon = 0.5 * (lon_edges[:-1] + lon_edges[1:])
            # exact band areas: integral of cos(lat) over each cell
            band = np.sin(lat_edges[:-1]) - np.sin(lat_edges[1:])
            LAT, LON = np.meshgrid(lat, lon, indexing="ij")
            self.points = np.stack(
                [np.cos(LAT) * np.cos(LON), np.cos(LAT) * np.sin(LON), np.sin(LAT)], axis=-1
            ).reshape(-1, 3)
            self.weights = np.repeat(band, 2 * res) * (2 * np.pi / (2 * res))
            self.shape = (res, 2 * res)
        elif isinstance(geometry, ImplicitSurface) and hasattr(geometry.sdf, "chart"):
            sdf = geometry.sdf
            step = 2 * np.pi / res
            ang = -np.pi + (np.arange(res) + 0.5) * step
            TH, PH = np.meshgrid(ang[::-1], ang, indexing="ij")
            self.points = sdf.chart(TH, PH).reshape(-1, 3)
            self.weights = (sdf.r * (sdf.R + sdf.r * np.cos(TH)) * step * step).ravel()
            self.shape = (res, res)
        else:
            raise GridMismatch(f"no quadrature grid for {geometry.kind}")

    def cell_index(self, x):
        """Flat index of the cell containing each point."""
        x = np.atleast_2d(x)
        geom = self.geometry
        rows, cols = self.shape
        if isinstance(geom, FlatTorus):
            c = np.floor((x[:, 0] + 1.0) / 2.0 * cols)
            r = np.floor((1.0 - x[:, 1]) / 2.0 * rows)
        elif isinstance(geom, Sphere):
            lat = np.arcsin(np.clip(x[:, 2] / np.linalg.norm(x, axis=-1), -1, 1))
            lon = np.arctan2(x[:, 1], x[:, 0])
            r = np.floor((np.pi / 2 - lat) / np.pi * rows)
            c = np.floor((lon + np.pi) / (2 * np.pi) * cols)
        else:
            theta, phi = geom.sdf.angles(x)
            r = np.floor((np.pi - theta) / (2 * np.pi) * rows)
            c = np.floor((phi + np.pi) / (2 * np.pi) * cols)
        r = np.clip(r, 0, rows - 1).astype(int)
        c = np.clip(c, 0, cols - 1).astype(int)
        return r * cols + c

    def histogram(self, x):
        """Empirical probability of each cell."""
        counts = np.bincount(self.cell_index(x), minlength=self.weights.size).astype(float)
        return counts / max(counts.sum(), 1.0)

    def mass(self, density_values):
        """Cell probabilities from density values at the cell centres."""
        q = np.asarray(density_values, dtype=float) * self.weights
        return q / q.sum()

    def integrate(self, values):
        return float(np.sum(np.asarray(values, dtype=float) * self.weights))


def eval_nll(model, points):
    """Mean negative log of ``mu_plus`` at ``points``, in nats."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.size == 0:
        raise EmptyDataset("cannot score an empty test set")
    return float(-np.mean(np.log(model.density(points).mu_plus)))


def tv_distance(p, q):
    """Half the L1 distance between two cell distributions (each renormalized)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise GridMismatch(f"histogram shapes differ: {p.shape} vs {q.shape}")
    return float(0.5 * np.abs(p / p.sum() - q / q.sum()).sum())


def density_on_grid(model_or_fn, grid):
    if callable(model_or_fn) and not hasattr(model_or_fn, "density"):
        return np.asarray(model_or_fn(grid.points), dtype=float)
    return model_or_fn.density(grid.points).mu_plus


def raster_density(model_or_fn, grid, out_path):
    """Write density at the grid cell centres as an 8-bit PGM plus a min/max sidecar.

    Returns the raw density values, shaped like the raster.
    """
    values = density_on_grid(model_or_fn, grid).reshape(grid.shape)
    lo, hi = float(values.min()), float(values.max())
    if hi > lo:
        pixels = np.floor((values - lo) / (hi - lo) * 255.0 + 0.5)
    else:
        pixels = np.zeros(values.shape)
    try:
        write_pgm(out_path, np.clip(pixels, 0, 255))
        with open(str(out_path) + ".txt", "w") as fh:
            fh.write(f"min {lo!r}\nmax {hi!r}\n")
    except OSError as exc:
        raise IoError(f"cannot write {out_path}: {exc}") from exc
    return values
