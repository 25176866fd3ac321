"""Datasets on the supported manifolds."""

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AllZeroImage,
    InvalidValue,
    IoError,
    MalformedRow,
    OutOfRangeCoordinate,
    UnknownDataset,
    UnreadableImage,
)
from .geometry import FlatTorus, ImplicitSurface, Sphere, TorusSdf, wrap

ON_MANIFOLD_TOL = {"flat_torus": 0.0, "sphere": 1e-9}


@dataclass
class Dataset:
    points: np.ndarray
    geometry: object
    source: str
    train_idx: np.ndarray = None
    test_idx: np.ndarray = None
    sampler: object = None  # callable(rng, count) -> points, for fresh batches
    density_fn: object = None  # closed-form target density, when known
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float)
        tol = ON_MANIFOLD_TOL.get(self.geometry.kind, 1e-8)
        if len(self.points) and self.geometry.manifold_error(self.points).max() > tol:
            raise InvalidValue(f"{self.source}: points are not on the {self.geometry.kind}")

    def __len__(self):
        return len(self.points)

    def train_points(self):
        return self.points if self.train_idx is None else self.points[self.train_idx]

    def test_points(self):
        return self.points[:0] if self.test_idx is None else self.points[self.test_idx]

    def split(self, train_fraction=0.8, seed=0):
        perm = np.random.default_rng(seed).permutation(len(self.points))
        n_train = int(round(train_fraction * len(self.points)))
        self.train_idx = np.sort(perm[:n_train])
        self.test_idx = np.sort(perm[n_train:])
        return self


# ---------------------------------------------------------------------------
# toy densities on the flat torus


@dataclass(frozen=True)
class WrappedGaussianMix:
    """Mixture of isotropic Gaussians wrapped onto the flat torus."""

    centers: tuple = ((-0.5, -0.5), (0.5, 0.5))
    sigma: float = 0.2
    weights: tuple = None

    def _w(self):
        k = len(self.centers)
        return np.full(k, 1.0 / k) if self.weights is None else np.asarray(self.weights, float)

    def sample(self, rng, count):
        c = np.asarray(self.centers, dtype=float)
        comp = rng.choice(len(c), size=count, p=self._w())
        return wrap(c[comp] + self.sigma * rng.standard_normal((count, 2)))

    def density(self, x):
        # three lattice images per axis; farther images are below exp(-50)
        x = np.atleast_2d(x)
        out = np.zeros(len(x))
        norm = 1.0 / (np.sqrt(2 * np.pi) * self.sigma)
        for w, c in zip(self._w(), np.asarray(self.centers, float)):
            per_axis = []
            for a in range(2):
                diff = wrap(x[:, a] - c[a])
                s = sum(np.exp(-0.5 * ((diff + 2.0 * k) / self.sigma) ** 2) for k in (-1, 0, 1))
                per_axis.append(norm * s)
            out += w * per_axis[0] * per_axis[1]
        return out


EIGHT_GAUSSIAN_RADIUS = 0.75
EIGHT_GAUSSIAN_STD = 0.09


def eight_gaussian_centers():
    ang = np.arange(8) * np.pi / 4
    return EIGHT_GAUSSIAN_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def _eight_gaussians(rng, n):
    c = eight_gaussian_centers()
    return c[rng.integers(0, 8, n)] + EIGHT_GAUSSIAN_STD * rng.standard_normal((n, 2))


def _checkerboard(rng, n):
    x1 = rng.uniform(-2, 2, n)
    x2 = rng.uniform(0, 1, n) - rng.integers(0, 2, n) * 2.0
    x2 = x2 + np.floor(x1) % 2
    return 0.5 * np.stack([x1, x2], axis=-1)


def checkerboard_black(x):
    """True where a point lies in a cell populated by the checkerboard."""
    cells = np.floor(2.0 * np.asarray(x))
    return (cells[:, 0] + cells[:, 1]) % 2 == 0


def _two_spirals(rng, n):
    half = n // 2
    t = np.sqrt(rng.uniform(0, 1, (n - half, 1))) * 540 * (2 * np.pi) / 360
    d1 = np.hstack([-np.cos(t) * t, np.sin(t) * t]) + rng.uniform(0, 1, (n - half, 2)) * 0.5
    pts = np.vstack([d1, -d1[:half]]) / 3.0
    pts = pts + 0.1 * rng.standard_normal(pts.shape)
    return pts / 4.0


def _pinwheel(rng, n, classes=5, radial_std=0.3, tangential_std=0.1, rate=0.25):
    rads = np.linspace(0, 2 * np.pi, classes, endpoint=False)
    feats = rng.standard_normal((n, 2)) * np.array([radial_std, tangential_std])
    feats[:, 0] += 1.0
    labels = rng.integers(0, classes, n)
    angles = rads[labels] + rate * np.exp(feats[:, 0])
    rot = np.stack([np.cos(angles), -np.sin(angles), np.sin(angles), np.cos(angles)], axis=-1)
    pts = np.einsum("ni,nij->nj", feats, rot.reshape(-1, 2, 2))
    return 2.0 * pts / 4.0


def _two_moons(rng, n):
    half = n // 2
    a = rng.uniform(0, np.pi, n)
    outer = np.stack([np.cos(a[:half]), np.sin(a[:half])], axis=-1)
    inner = np.stack([1 - np.cos(a[half:]), 0.5 - np.sin(a[half:])], axis=-1)
    pts = np.vstack([outer, inner]) + 0.1 * rng.standard_normal((n, 2))
    return 0.6 * (pts - np.array([0.5, 0.25]))


def _concentric_rings(rng, n):
    radii = np.array([1.0, 0.75, 0.5, 0.25]) * 0.9
    r = radii[rng.integers(0, 4, n)]
    a = rng.uniform(0, 2 * np.pi, n)
    pts = r[:, None] * np.stack([np.cos(a), np.sin(a)], axis=-1)
    return pts + 0.025 * rng.standard_normal((n, 2))


def _swiss_roll(rng, n):
    t = 1.5 * np.pi * (1 + 2 * rng.uniform(0, 1, n))
    pts = np.stack([t * np.cos(t), t * np.sin(t)], axis=-1) + rng.standard_normal((n, 2))
    return pts / 16.0


TOY_GENERATORS = {
    "eight_gaussians": _eight_gaussians,
    "checkerboard": _checkerboard,
    "two_spirals": _two_spirals,
    "pinwheel": _pinwheel,
    "two_moons": _two_moons,
    "concentric_rings": _concentric_rings,
    "swiss_roll": _swiss_roll,
    "wrapped_gaussian_mix": None,
}


def toy_sampler(name, rng, count, mix=None):
    """Dataset of ``count`` points from a named toy density on the flat torus."""
    if name not in TOY_GENERATORS:
        raise UnknownDataset(f"unknown toy dataset {name!r}; choose from {sorted(TOY_GENERATORS)}")
    density = None
    if name == "wrapped_gaussian_mix":
        mix = mix or WrappedGaussianMix()
        pts = mix.sample(rng, count)
        density = mix.density
    else:
        pts = wrap(TOY_GENERATORS[name](rng, count))
    return Dataset(pts, FlatTorus(), f"toy:{name}", density_fn=density)


# ---------------------------------------------------------------------------
# images


def read_grayscale(path):
    """8-bit grayscale image as a (rows, cols) float array."""
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
    except OSError as exc:
        raise UnreadableImage(f"cannot read {path}: {exc}") from exc
    if head == b"P5":
        return _read_pgm(path)
    try:
        from PIL import Image

        with Image.open(path) as img:
            if img.mode not in ("L", "P", "1", "I;16"):
                raise UnreadableImage(f"{path}: expected a grayscale image, got mode {img.mode}")
            return np.asarray(img.convert("L"), dtype=float)
    except UnreadableImage:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise UnreadableImage(f"cannot decode {path}: {exc}") from exc


def _read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise UnreadableImage(f"{path}: truncated PGM header")
        tokens.append(int(blob[start:pos]))
    width, height, maxval = tokens
    pos += 1
    if maxval > 255 or width * height < 1:
        raise UnreadableImage(f"{path}: only 8-bit non-empty PGM images are supported")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height, offset=pos)
    if pixels.size != width * height:
        raise UnreadableImage(f"{path}: truncated pixel data")
    return pixels.reshape(height, width).astype(float)


def write_pgm(path, pixels):
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


class ImageDensity:
    """Piecewise-constant density on the torus proportional to pixel intensity."""

    def __init__(self, intensities):
        img = np.asarray(intensities, dtype=float)
        if img.ndim != 2 or img.size < 1:
            raise UnreadableImage("image must be a non-empty 2D array")
        if np.any(img < 0) or img.sum() <= 0:
            raise AllZeroImage("image has no positive intensity")
        self.image = img
        self.rows, self.cols = img.shape
        self.prob = (img / img.sum()).ravel()
        self.cell_area = 4.0 / img.size

    def sample(self, rng, count):
        idx = rng.choice(self.prob.size, size=count, p=self.prob)
        row, col = np.divmod(idx, self.cols)
        jitter = rng.uniform(0.0, 1.0, size=(count, 2))
        x = -1.0 + 2.0 * (col + jitter[:, 0]) / self.cols
        y = 1.0 - 2.0 * (row + jitter[:, 1]) / self.rows
        return wrap(np.stack([x, y], axis=-1))

    def density(self, pts):
        pts = np.atleast_2d(pts)
        col = np.clip(np.floor((pts[:, 0] + 1.0) / 2.0 * self.cols), 0, self.cols - 1).astype(int)
        row = np.clip(np.floor((1.0 - pts[:, 1]) / 2.0 * self.rows), 0, self.rows - 1).astype(int)
        return self.prob[row * self.cols + col] / self.cell_area


def image_sampler(path, rng, count):
    """Dataset sampled from image intensities; ``sampler`` draws fresh batches."""
    img = ImageDensity(read_grayscale(path))
    return Dataset(img.sample(rng, count), FlatTorus(), f"image:{path}",
                   sampler=img.sample, density_fn=img.density)


# ---------------------------------------------------------------------------
# earth data


def latlon_to_xyz(lat, lon):
    phi = np.radians(np.asarray(lat, dtype=float))
    lam = np.radians(np.asarray(lon, dtype=float))
    return np.stack([np.cos(phi) * np.cos(lam), np.cos(phi) * np.sin(lam), np.sin(phi)], axis=-1)


def xyz_to_latlon(x):
    x = np.atleast_2d(x)
    lat = np.degrees(np.arcsin(np.clip(x[:, 2], -1.0, 1.0)))
    lon = np.degrees(np.arctan2(x[:, 1], x[:, 0]))
    return lat, lon


def load_latlon_csv(path, train_fraction=0.8, seed=0):
    """Sphere dataset from a CSV with ``lat`` and ``lon`` columns in degrees."""
    lats, lons = [], []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip().lower() for h in next(reader)]
        except StopIteration:
            raise MalformedRow(1, "empty file") from None
        if "lat" not in header or "lon" not in header:
            raise MalformedRow(1, "header must contain 'lat' and 'lon' columns")
        ilat, ilon = header.index("lat"), header.index("lon")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            try:
                lat, lon = float(row[ilat]), float(row[ilon])
            except (IndexError, ValueError):
                raise MalformedRow(line, f"cannot parse lat/lon from {row!r}") from None
            if not (np.isfinite(lat) and np.isfinite(lon)):
                raise MalformedRow(line, "non-finite coordinate")
            if not -90.0 <= lat <= 90.0:
                raise OutOfRangeCoordinate(line, f"lat {lat} outside [-90, 90]")
            if not -180.0 <= lon <= 180.0:
                raise OutOfRangeCoordinate(line, f"lon {lon} outside [-180, 180]")
            lats.append(lat)
            lons.append(lon)
    pts = latlon_to_xyz(lats, lons) if lats else np.zeros((0, 3))
    ds = Dataset(pts, Sphere(), f"csv:{path}")
    return ds.split(train_fraction, seed)


# ---------------------------------------------------------------------------
# von Mises-Fisher mixtures on the sphere


@dataclass(frozen=True)
class VmfComponent:
    mean: tuple
    kappa: float
    weight: float


class VmfMixtureSpec:
    def __init__(self, components):
        comps = []
        for c in components:
            if isinstance(c, dict):
                c = VmfComponent(tuple(c["mean"]), float(c["kappa"]), float(c["weight"]))
            comps.append(c)
        if not comps:
            raise InvalidValue("vMF mixture needs at least one component")
        means = np.array([c.mean for c in comps], dtype=float)
        norms = np.linalg.norm(means, axis=-1)
        if means.shape[1] != 3 or np.any(np.abs(norms - 1.0) > 1e-12):
            raise InvalidValue("vMF mean directions must be unit 3-vectors")
        kappas = np.array([c.kappa for c in comps], dtype=float)
        weights = np.array([c.weight for c in comps], dtype=float)
        if np.any(kappas <= 0):
            raise InvalidValue("vMF concentrations must be positive")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidValue("vMF weights must be nonnegative and sum to 1")
        self.components = comps
        self.means, self.kappas, self.weights = means, kappas, weights

    def log_density(self, x):
        x = np.atleast_2d(x)
        k = self.kappas
        # log(k / (4 pi sinh k)) written to stay finite for tiny and huge k
        log_norm = np.log(k) - np.log(2 * np.pi) - np.log(-np.expm1(-2 * k))
        logits = np.log(np.maximum(self.weights, 1e-300)) + log_norm + k * (x @ self.means.T - 1.0)
        top = logits.max(axis=1, keepdims=True)
        return (top + np.log(np.exp(logits - top).sum(axis=1, keepdims=True)))[:, 0]

    def density(self, x):
        return np.exp(self.log_density(x))

    def sample(self, rng, count):
        comp = rng.choice(len(self.weights), size=count, p=self.weights)
        k = self.kappas[comp]
        u = rng.uniform(0.0, 1.0, count)
        # inverse CDF of the cosine to the mean on S^2
        w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * k)) / k
        w = np.clip(w, -1.0, 1.0)
        az = rng.uniform(0.0, 2 * np.pi, count)
        s = np.sqrt(np.maximum(0.0, 1.0 - w * w))
        local = np.stack([s * np.cos(az), s * np.sin(az), w], axis=-1)
        out = np.empty((count, 3))
        for j, m in enumerate(self.means):
            sel = comp == j
            out[sel] = local[sel] @ _frame(m)
        return out / np.linalg.norm(out, axis=-1, keepdims=True)

    def cross_entropy(self, rng, count=10**6):
        """Monte Carlo estimate of -E log p under the mixture itself."""
        return float(-np.mean(self.log_density(self.sample(rng, count))))


def _frame(m):
    """Rows e1, e2, m: an orthonormal basis whose third vector is ``m``."""
    m = np.asarray(m, dtype=float)
    helper = np.array([1.0, 0.0, 0.0]) if abs(m[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(m, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(m, e1)
    return np.stack([e1, e2, m])


def vmf_mixture(spec, rng, count):
    if not isinstance(spec, VmfMixtureSpec):
        spec = VmfMixtureSpec(spec)
    return Dataset(spec.sample(rng, count), Sphere(), "vmf:mixture",
                   sampler=None, density_fn=spec.density, meta={"spec": spec})


# ---------------------------------------------------------------------------
# analytic targets on the implicit torus


class TorusHarmonicDensity:
    """``c * max(0, cos(k theta) cos(k phi))`` on a torus of revolution."""

    def __init__(self, sdf=None, k=1, res=512):
        self.sdf = sdf or TorusSdf()
        self.k = int(k)
        theta = (np.arange(res) + 0.5) * 2 * np.pi / res - np.pi
        tt, pp = np.meshgrid(theta, theta, indexing="ij")
        area = self.sdf.r * (self.sdf.R + self.sdf.r * np.cos(tt)) * (2 * np.pi / res) ** 2
        self.norm = 1.0 / np.sum(self._raw(tt, pp) * area)

    def _raw(self, theta, phi):
        return np.maximum(0.0, np.cos(self.k * theta) * np.cos(self.k * phi))

    def density(self, x):
        theta, phi = self.sdf.angles(x)
        return self.norm * self._raw(theta, phi)

    def sample(self, rng, count):
        out, filled = np.empty((count, 3)), 0
        while filled < count:
            prop = self.sdf.sample(rng, 4 * (count - filled) + 16)
            keep = rng.uniform(0, 1, len(prop)) < self.density(prop) / self.norm
            got = prop[keep][: count - filled]
            out[filled : filled + len(got)] = got
            filled += len(got)
        return out


def torus_harmonic(k, rng, count, sdf=None):
    target = TorusHarmonicDensity(sdf, k)
    return Dataset(target.sample(rng, count), ImplicitSurface(target.sdf),
                   f"harmonic:{k}", density_fn=target.density)


def read_points_csv(path, dim=None):
    """Point file: one ambient point per row, optional header line."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    pts = []
    for line, row in enumerate(rows, start=1):
        if not row:
            continue
        try:
            vals = [float(c) for c in row]
        except ValueError:
            if line == 1:
                continue
            raise MalformedRow(line, f"non-numeric entry in {row!r}") from None
        if dim is not None and len(vals) != dim:
            raise MalformedRow(line, f"expected {dim} columns, got {len(vals)}")
        pts.append(vals)
    return np.array(pts, dtype=float).reshape(-1, dim or (len(pts[0]) if pts else 0))


def write_points_csv(path, points, header=None):
    points = np.atleast_2d(points)
    with open(path, "w", newline="") as fh:
        if header:
            fh.write(",".join(header) + "\n")
        for row in points:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
