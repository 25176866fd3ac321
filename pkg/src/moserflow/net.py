"""The neural vector field and its exact divergence.

On the flat torus the field is an MLP applied to a periodic encoding of the
input.  On submanifolds the MLP output is evaluated at the projected point
and then projected onto the tangent plane there, which makes the field
constant along normal lines; its ambient (Euclidean) divergence therefore
equals the intrinsic one on the surface.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import ad
from .errors import DimensionMismatch, InvalidValue, NonFiniteParameter, ParamFileError
from .geometry import FlatTorus

MAGIC = b"MFNT"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_widths: tuple
    output_dim: int
    softplus_beta: float = 100.0

    @property
    def layer_shapes(self):
        dims = [self.input_dim, *self.hidden_widths, self.output_dim]
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]

    @property
    def n_params(self):
        return sum(i * o + o for i, o in self.layer_shapes)


@dataclass(frozen=True)
class PosEncoding:
    """Periodic features cos(i pi x), sin(i pi x) for i = 1..k."""

    k: int = 0

    def dim(self, ambient_dim):
        return ambient_dim if self.k == 0 else 2 * self.k * ambient_dim

    def __call__(self, x):
        if self.k == 0:
            return x
        parts = []
        for i in range(1, self.k + 1):
            arg = (i * np.pi) * x
            parts.append(ad.cos(arg))
            parts.append(ad.sin(arg))
        return ad.concat(parts, axis=-1)


def glorot_layers(spec, rng, dtype=np.float64):
    layers = []
    for fan_in, fan_out in spec.layer_shapes:
        a = np.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-a, a, size=(fan_in, fan_out)).astype(dtype)
        layers.append((W, np.zeros(fan_out, dtype=dtype)))
    return layers


def flatten(layers):
    """ParamVector layout: per layer, weight row-major then bias."""
    return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b in layers])


def unflatten(theta, spec):
    theta = np.asarray(theta)
    if theta.shape != (spec.n_params,):
        raise DimensionMismatch(f"expected {spec.n_params} parameters, got {theta.shape}")
    layers, pos = [], 0
    for fan_in, fan_out in spec.layer_shapes:
        W = theta[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = theta[pos : pos + fan_out]
        pos += fan_out
        layers.append((W.copy(), b.copy()))
    return layers


class VectorFieldNet:
    """MLP vector field ``u`` on a geometry.

    ``params`` arguments accept a list of ``(W, b)`` pairs of arrays or
    tensors; ``None`` means the net's own weights.  Weights are stored in
    float64; ``dtype`` is the precision used to evaluate the field (float32
    roughly halves training time).
    """

    def __init__(self, geometry, spec, encoding, layers, linearized=False,
                 dtype=np.float64):
        if isinstance(geometry, FlatTorus):
            if encoding.k < 1:
                raise InvalidValue("posenc_k must be >= 1 on the flat torus")
        elif encoding.k != 0:
            raise InvalidValue("positional encoding is only defined on the flat torus")
        if spec.output_dim != geometry.ambient_dim:
            raise InvalidValue("MLP output dimension must equal the ambient dimension")
        if spec.input_dim != encoding.dim(geometry.ambient_dim):
            raise InvalidValue("MLP input dimension does not match the encoding")
        self.geometry = geometry
        self.spec = spec
        self.encoding = encoding
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float))
                       for W, b in layers]
        self.linearized = linearized
        self.dtype = np.dtype(dtype)

    @classmethod
    def create(cls, geometry, hidden, posenc_k=None, softplus_beta=100.0, seed=0,
               linearized=False, dtype=np.float64):
        if posenc_k is None:
            posenc_k = 1 if isinstance(geometry, FlatTorus) else 0
        encoding = PosEncoding(int(posenc_k))
        spec = MlpSpec(encoding.dim(geometry.ambient_dim), tuple(int(h) for h in hidden),
                       geometry.ambient_dim, float(softplus_beta))
        layers = glorot_layers(spec, np.random.default_rng(seed))
        return cls(geometry, spec, encoding, layers, linearized, dtype)

    # parameters ------------------------------------------------------------

    @property
    def theta(self):
        return flatten(self.layers)

    def with_theta(self, theta):
        return VectorFieldNet(self.geometry, self.spec, self.encoding,
                              unflatten(theta, self.spec), self.linearized, self.dtype)

    def set_theta(self, theta):
        self.layers = unflatten(theta, self.spec)

    def compute_layers(self):
        """Weights cast to the evaluation dtype."""
        if self.dtype == np.float64:
            return self.layers
        return [(W.astype(self.dtype), b.astype(self.dtype)) for W, b in self.layers]

    # evaluation ------------------------------------------------------------

    def mlp_forward(self, z, params=None):
        layers = self.compute_layers() if params is None else params
        if np.shape(ad.value(z))[-1] != self.spec.input_dim:
            raise DimensionMismatch(
                f"MLP expects input dim {self.spec.input_dim}, got {np.shape(ad.value(z))[-1]}"
            )
        h = z
        last = len(layers) - 1
        for i, (W, b) in enumerate(layers):
            h = h @ W + b
            if i < last:
                h = ad.softplus(h, self.spec.softplus_beta)
        return h

    def field_u(self, x, params=None):
        """Tangent vector field u at rows of ``x`` (any ad type)."""
        geom = self.geometry
        if isinstance(geom, FlatTorus):
            return self.mlp_forward(self.encoding(x), params)
        if self.linearized:
            base = geom.project(ad.value(x))
            nb = geom.normal(base)
            delta = x - base
            p = base + delta - nb * ad.dot(nb, delta, keepdims=True)
        else:
            p = geom.project_generic(x)
        n = geom.normal_generic(p)
        v = self.mlp_forward(p, params)
        return v - n * ad.dot(n, v, keepdims=True)

    def field_and_divergence(self, x, params=None):
        """``(u(x), div_E u(x))`` with the divergence from d forward passes."""
        x = x if isinstance(x, (ad.Dual, ad.Tensor)) else np.asarray(x, dtype=self.dtype)
        if np.shape(ad.value(x))[-1] != self.geometry.ambient_dim:
            raise DimensionMismatch("point dimension does not match the geometry")
        return ad.jacobian_trace(lambda y: self.field_u(y, params), x)

    def divergence_u(self, x, params=None):
        return self.field_and_divergence(x, params)[1]

    # serialization ---------------------------------------------------------

    def save(self, path):
        save_params(path, self.layers)

    def load_theta(self, path):
        shapes, theta = load_params(path)
        if [tuple(s) for s in shapes] != self.spec.layer_shapes:
            raise ParamFileError(
                f"{path}: layer shapes {shapes} do not match the configured architecture "
                f"{self.spec.layer_shapes}"
            )
        self.set_theta(theta)
        return self


def as_tensors(layers):
    return [(ad.Tensor.leaf(W), ad.Tensor.leaf(b)) for W, b in layers]


def grad_scalar_wrt_params(net, scalar_fn):
    """Value and flat gradient of ``scalar_fn(params)`` w.r.t. the net weights.

    ``scalar_fn`` receives tensor-valued params, must route them through the
    net's ``field_u``/``divergence_u`` and return a scalar tensor.  The
    gradient is one reverse sweep over the forward-mode divergence graph.
    """
    params = as_tensors(net.compute_layers())
    out = scalar_fn(params)
    if not isinstance(out, ad.Tensor):
        return float(np.asarray(out)), np.zeros(net.spec.n_params)
    if out.value.size != 1:
        raise DimensionMismatch("scalar_fn must return a scalar")
    out.backward()
    grads = []
    for W, b in params:
        grads.append((np.zeros_like(W.value) if W.grad is None else W.grad,
                      np.zeros_like(b.value) if b.grad is None else b.grad))
    return float(out.value), flatten(grads).astype(np.float64)


def check_finite(theta):
    bad = np.flatnonzero(~np.isfinite(theta))
    if len(bad):
        raise NonFiniteParameter(int(bad[0]))


def save_params(path, layers):
    theta = flatten(layers).astype("<f8")
    header = MAGIC + struct.pack("<IQI", FORMAT_VERSION, theta.size, len(layers))
    header += b"".join(struct.pack("<II", *W.shape) for W, _ in layers)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(theta.tobytes())


def load_params(path):
    """Read an MFNT file; returns ``(layer_shapes, theta)``."""
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise ParamFileError(f"cannot read {path}: {exc}") from exc
    if blob[:4] != MAGIC:
        raise ParamFileError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, p, n_layers = struct.unpack_from("<IQI", blob, 4)
        if version != FORMAT_VERSION:
            raise ParamFileError(f"{path}: unsupported version {version}")
        off = 4 + struct.calcsize("<IQI")
        shapes = []
        for _ in range(n_layers):
            shapes.append(struct.unpack_from("<II", blob, off))
            off += 8
    except struct.error as exc:
        raise ParamFileError(f"{path}: truncated header") from exc
    if sum(i * o + o for i, o in shapes) != p or len(blob) - off != 8 * p:
        raise ParamFileError(f"{path}: parameter count does not match header")
    theta = np.frombuffer(blob, dtype="<f8", count=p, offset=off).astype(np.float64)
    return shapes, theta
