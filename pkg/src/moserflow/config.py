"""Run configuration: a flat table of dotted keys read from JSON.

Nested JSON objects are flattened, so ``{"ode": {"steps": 64}}`` and
``{"ode.steps": 64}`` are the same setting.  Every key has a default and a
validator; unknown keys are rejected.  The builders at the bottom turn a
resolved config into geometry, network, model, dataset and solver objects.
"""

import json
import os

import numpy as np

from .errors import InvalidValue, IoError, UnknownKey
from .geometry import FlatTorus, ImplicitSurface, make_geometry

MANIFOLDS = ("flat_torus", "sphere", "implicit_torus")
DATA_SOURCES = ("toy", "image", "latlon_csv", "points_csv", "vmf", "torus_harmonic")


def _positive(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _is_int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _is_real(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _int_at_least(lo):
    return lambda x: _is_int(x) and x >= lo, f"an integer >= {lo}"


def _real(pred=None, what="a real number"):
    return lambda x: _is_real(x) and (pred is None or pred(x)), what


def _choice(options):
    return lambda x: x in options, f"one of {list(options)}"


def _optional(check):
    fn, what = check
    return lambda x: x is None or fn(x), f"null or {what}"


_BOOL = (lambda x: isinstance(x, bool), "true or false")
_STR = (lambda x: isinstance(x, str), "a string")
_WIDTHS = (lambda x: isinstance(x, list) and len(x) > 0 and all(_is_int(w) and w > 0 for w in x),
           "a nonempty list of positive integers")
_VMF = (lambda x: isinstance(x, list) and len(x) > 0 and all(isinstance(c, dict) for c in x),
        "a list of {mean, kappa, weight} objects")

# key -> (default, (predicate, description))
SCHEMA = {
    "manifold": ("flat_torus", _choice(MANIFOLDS)),
    "implicit_torus.R": (1.0, _real(_positive, "a positive real")),
    "implicit_torus.r": (0.4, _real(_positive, "a positive real")),
    # network
    "hidden": ([256, 256, 256], _WIDTHS),
    "posenc_k": (None, _optional(_int_at_least(0))),
    "softplus_beta": (100.0, _real(_positive, "a positive real")),
    "seed": (0, _int_at_least(0)),
    "linearized_projection": (False, _BOOL),
    "dtype": ("float64", _choice(("float64", "float32"))),
    # model
    "epsilon": (None, _optional(_real(_positive, "a positive real"))),
    "lambda_minus": (1.0, _real(_nonneg, "a nonnegative real")),
    "lambda_plus": (0.0, _real(_nonneg, "a nonnegative real")),
    "unnormalized": (None, _optional(_BOOL)),
    # training
    "lr": (1e-4, _real(_nonneg, "a nonnegative real")),
    "adam_beta1": (0.9, _real(lambda x: 0 <= x < 1, "a real in [0, 1)")),
    "adam_beta2": (0.999, _real(lambda x: 0 <= x < 1, "a real in [0, 1)")),
    "adam_eps": (1e-8, _real(_positive, "a positive real")),
    "iters": (1000, _int_at_least(0)),
    "data_batch": (1024, _int_at_least(0)),
    "uniform_batch": (1024, _int_at_least(1)),
    "checkpoint_every": (0, _int_at_least(0)),
    "deterministic": (True, _BOOL),
    "with_replacement": (False, _BOOL),
    "lr_schedule": ("constant", _choice(("constant", "cosine"))),
    "lr_final": (0.0, _real(_nonneg, "a nonnegative real")),
    # solver
    "ode.method": ("rk4", _choice(("rk4", "dopri5"))),
    "ode.steps": (200, _int_at_least(16)),
    "ode.rtol": (1e-5, _real(_positive, "a positive real")),
    "ode.atol": (1e-7, _real(_positive, "a positive real")),
    "ode.chunk": (16384, _int_at_least(1)),
    "ode.clock": ("linear", _choice(("linear", "floor"))),
    # data
    "data.source": ("toy", _choice(DATA_SOURCES)),
    "data.name": ("wrapped_gaussian_mix", _STR),
    "data.path": (None, _optional(_STR)),
    "data.count": (100000, _int_at_least(1)),
    "data.seed": (0, _int_at_least(0)),
    "data.train_fraction": (0.8, _real(lambda x: 0 < x <= 1, "a real in (0, 1]")),
    "data.fresh_batches": (True, _BOOL),
    "data.vmf": ([{"mean": [0.0, 0.0, 1.0], "kappa": 10.0, "weight": 0.5},
                  {"mean": [1.0, 0.0, 0.0], "kappa": 10.0, "weight": 0.5}], _VMF),
    "data.harmonic_k": (1, _int_at_least(1)),
    # evaluation
    "eval.grid_res": (256, _int_at_least(2)),
    "eval.tv_res": (50, _int_at_least(2)),
    "threads": (None, _optional(_int_at_least(1))),
}


def flatten(doc, prefix=""):
    """Nested dicts -> dotted keys.  Values that are lists stay whole."""
    out = {}
    for key, val in doc.items():
        full = f"{prefix}{key}"
        if isinstance(val, dict) and full not in SCHEMA:
            out.update(flatten(val, full + "."))
        else:
            out[full] = val
    return out


class RunConfig:
    """Validated settings; ``cfg[key]`` reads a resolved value."""

    def __init__(self, values):
        self.values = dict(values)

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    def to_json(self):
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def write_resolved(self, path):
        try:
            with open(path, "w") as fh:
                fh.write(self.to_json())
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc


def resolve(doc=None, overrides=None):
    """Apply defaults once, validate every key, check cross-key constraints."""
    given = flatten(doc or {})
    given.update(flatten(overrides or {}))
    for key in given:
        if key not in SCHEMA:
            raise UnknownKey(f"unknown config key {key!r}")
    values = {}
    for key, (default, (check, what)) in SCHEMA.items():
        val = given.get(key, default)
        if isinstance(val, float) and float(val).is_integer() and _is_int(default):
            val = int(val)
        if not check(val):
            raise InvalidValue(f"{key} must be {what}, got {val!r}")
        values[key] = val

    if values["posenc_k"] is None:
        values["posenc_k"] = 1 if values["manifold"] == "flat_torus" else 0
    if values["manifold"] == "flat_torus" and values["posenc_k"] < 1:
        raise InvalidValue("posenc_k must be >= 1 on flat_torus")
    if values["manifold"] != "flat_torus" and values["posenc_k"] != 0:
        raise InvalidValue("posenc_k must be 0 off the flat torus")
    if values["lambda_minus"] + values["lambda_plus"] < 1:
        raise InvalidValue("lambda_minus + lambda_plus must be >= 1")
    geom = build_geometry(values)
    if values["epsilon"] is None:
        values["epsilon"] = 1e-5 / geom.volume
    if not values["epsilon"] < 1.0 / geom.volume:
        raise InvalidValue(f"epsilon must lie in (0, 1/vol) = (0, {1.0 / geom.volume!r})")
    if values["unnormalized"] is None:
        values["unnormalized"] = isinstance(geom, ImplicitSurface)
    if values["threads"] is None:
        values["threads"] = os.cpu_count() or 1
    return RunConfig(values)


def parse_config(path, overrides=None):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidValue(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise InvalidValue(f"{path}: top level must be a JSON object")
    return resolve(doc, overrides)


# ---------------------------------------------------------------------------
# builders


def build_geometry(cfg):
    return make_geometry(cfg["manifold"], cfg["implicit_torus.R"], cfg["implicit_torus.r"])


def build_net(cfg, geometry=None, dtype=None):
    from .net import VectorFieldNet

    geometry = geometry or build_geometry(cfg)
    return VectorFieldNet.create(geometry, cfg["hidden"], cfg["posenc_k"], cfg["softplus_beta"],
                                 cfg["seed"], cfg["linearized_projection"],
                                 np.dtype(dtype or cfg["dtype"]))


def build_model(cfg, net=None, dtype=None):
    from .model import MoserModel

    net = net or build_net(cfg, dtype=dtype)
    return MoserModel(net, cfg["epsilon"], cfg["lambda_minus"], cfg["lambda_plus"],
                      cfg["unnormalized"])


def train_config(cfg):
    from .train import TrainConfig

    return TrainConfig(lr=cfg["lr"], adam_beta1=cfg["adam_beta1"], adam_beta2=cfg["adam_beta2"],
                       adam_eps=cfg["adam_eps"], iters=cfg["iters"],
                       data_batch=cfg["data_batch"], uniform_batch=cfg["uniform_batch"],
                       seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
                       deterministic=cfg["deterministic"],
                       with_replacement=cfg["with_replacement"],
                       lr_schedule=cfg["lr_schedule"], lr_final=cfg["lr_final"])


def ode_config(cfg):
    from .flow import OdeConfig

    return OdeConfig(cfg["ode.method"], cfg["ode.steps"], cfg["ode.rtol"], cfg["ode.atol"],
                     chunk=cfg["ode.chunk"], clock=cfg["ode.clock"])


def build_dataset(cfg, geometry=None):
    """Dataset named by the ``data.*`` keys, split by ``data.train_fraction``."""
    from . import data

    geometry = geometry or build_geometry(cfg)
    source = cfg["data.source"]
    rng = np.random.default_rng(cfg["data.seed"])
    count = cfg["data.count"]
    path = cfg["data.path"]
    if source in ("image", "latlon_csv", "points_csv") and path is None:
        raise InvalidValue(f"data.source={source} needs data.path")

    if source in ("toy", "image"):
        _require(geometry, FlatTorus, source)
        if source == "toy":
            ds = data.toy_sampler(cfg["data.name"], rng, count)
            if cfg["data.name"] == "wrapped_gaussian_mix" and cfg["data.fresh_batches"]:
                ds.sampler = data.WrappedGaussianMix().sample
        else:
            img = data.ImageDensity(data.read_grayscale(path))
            ds = data.Dataset(img.sample(rng, count), geometry, f"image:{path}",
                              density_fn=img.density)
            if cfg["data.fresh_batches"]:
                ds.sampler = img.sample
    elif source == "latlon_csv":
        if cfg["manifold"] != "sphere":
            raise InvalidValue("data.source=latlon_csv needs manifold=sphere")
        return data.load_latlon_csv(path, cfg["data.train_fraction"], cfg["data.seed"])
    elif source == "points_csv":
        ds = data.Dataset(data.read_points_csv(path, geometry.ambient_dim), geometry,
                          f"csv:{path}")
    elif source == "vmf":
        if cfg["manifold"] != "sphere":
            raise InvalidValue("data.source=vmf needs manifold=sphere")
        ds = data.vmf_mixture(data.VmfMixtureSpec(cfg["data.vmf"]), rng, count)
    else:
        if cfg["manifold"] != "implicit_torus":
            raise InvalidValue("data.source=torus_harmonic needs manifold=implicit_torus")
        ds = data.torus_harmonic(cfg["data.harmonic_k"], rng, count, geometry.sdf)
    if cfg["data.train_fraction"] < 1:
        ds.split(cfg["data.train_fraction"], cfg["data.seed"])
    return ds


def _require(geometry, kind, source):
    if not isinstance(geometry, kind):
        raise InvalidValue(f"data.source={source} needs manifold=flat_torus")
