"""``mf`` command line: train, sample, logp, eval, raster, data, check."""

import argparse
import json
import logging
import os
import sys

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, build_hash
from .config import (build_dataset, build_geometry, build_model, ode_config, parse_config,
                     resolve, train_config)
from .errors import InvalidValue, IoError, MoserFlowError

log = logging.getLogger("moserflow")

RESOLVED = "config.resolved"


def _parse_set(items):
    """``key=value`` overrides; values are read as JSON when they parse."""
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidValue(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key.strip()] = json.loads(raw)
        except json.JSONDecodeError:
            out[key.strip()] = raw
    return out


def _load_config(args, params_path=None):
    overrides = _parse_set(getattr(args, "set", None))
    path = getattr(args, "config", None)
    if path is None and params_path is not None:
        # a training run leaves its resolved settings next to the weights
        candidate = os.path.join(os.path.dirname(os.path.abspath(params_path)), RESOLVED)
        if os.path.exists(candidate):
            path = candidate
    if path is None:
        return resolve({}, overrides)
    return parse_config(path, overrides)


def _load_model(args, cfg):
    model = build_model(cfg, dtype="float64")
    model.net.load_theta(args.params)
    return model


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(parent, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {parent}: {exc}") from exc


def _write_text(path, text):
    _ensure_parent(path)
    try:
        with open(path, "w") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    from .train import train

    overrides = _parse_set(args.set)
    if args.iters is not None:
        overrides["iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = parse_config(args.config, overrides) if args.config else resolve({}, overrides)
    try:
        os.makedirs(args.out, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {args.out}: {exc}") from exc
    cfg.write_resolved(os.path.join(args.out, RESOLVED))
    with threadpool_limits(cfg["threads"]):
        model = build_model(cfg)
        dataset = build_dataset(cfg, model.geometry)
        try:
            result = train(model, dataset, train_config(cfg), out_dir=args.out)
        except OSError as exc:
            raise IoError(str(exc)) from exc
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"trained {len(result.metrics)} iterations, final loss {last['total']:.6f}")
    return 0


def cmd_sample(args):
    from .data import write_points_csv
    from .flow import generate

    cfg = _load_config(args, args.params)
    with threadpool_limits(cfg["threads"]):
        model = _load_model(args, cfg)
        seed = cfg["seed"] if args.seed is None else args.seed
        z = model.geometry.sample_uniform(np.random.default_rng(seed), args.n)
        x = generate(model, z, ode_config(cfg))
    _ensure_parent(args.out)
    try:
        write_points_csv(args.out, x)
    except OSError as exc:
        raise IoError(f"cannot write {args.out}: {exc}") from exc
    return 0


def cmd_logp(args):
    from .data import read_points_csv
    from .flow import pushforward_logdensity

    cfg = _load_config(args, args.params)
    with threadpool_limits(cfg["threads"]):
        model = _load_model(args, cfg)
        pts = read_points_csv(args.points, model.geometry.ambient_dim)
        _validate_points(model.geometry, pts, args.points)
        logp = pushforward_logdensity(model, pts, ode_config(cfg))
    _write_text(args.out, "logp\n" + "".join(f"{v:.17g}\n" for v in logp))
    return 0


def cmd_eval(args):
    from .data import read_points_csv
    from .evaluate import GridQuadrature, eval_nll, tv_distance

    cfg = _load_config(args, args.params)
    with threadpool_limits(cfg["threads"]):
        model = _load_model(args, cfg)
        geom = model.geometry
        test = read_points_csv(args.test, geom.ambient_dim)
        _validate_points(geom, test, args.test)
        out = {"nll": eval_nll(model, test)}
        grid = GridQuadrature(geom, cfg["eval.grid_res"])
        dens = model.density(grid.points)
        out["integral_of_mu_bar"] = grid.integrate(dens.mu_bar)
        target = _named_target(cfg, geom)
        if target is not None:
            out["kl_vs_target"] = model.generalized_kl(target, grid.points, grid.weights)
        tv_grid = GridQuadrature(geom, cfg["eval.tv_res"])
        out["tv_distance"] = tv_distance(tv_grid.histogram(test),
                                         tv_grid.mass(model.density(tv_grid.points).mu_plus))
    _write_text(args.out, json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_raster(args):
    from .evaluate import GridQuadrature, raster_density

    cfg = _load_config(args, args.params)
    with threadpool_limits(cfg["threads"]):
        model = _load_model(args, cfg)
        _ensure_parent(args.out)
        raster_density(model, GridQuadrature(model.geometry, args.res), args.out)
    return 0


def cmd_data(args):
    from . import data

    rng = np.random.default_rng(args.seed)
    if args.kind == "toy":
        pts = data.toy_sampler(args.name, rng, args.count).points
    elif args.kind == "vmf":
        cfg = _load_config(args)
        pts = data.vmf_mixture(data.VmfMixtureSpec(cfg["data.vmf"]), rng, args.count).points
    elif args.kind == "harmonic":
        cfg = _load_config(args)
        sdf = build_geometry(cfg).sdf if cfg["manifold"] == "implicit_torus" else None
        pts = data.torus_harmonic(args.k, rng, args.count, sdf).points
    else:
        if args.input is None:
            raise InvalidValue("data latlon needs --input")
        pts = data.load_latlon_csv(args.input, 1.0, args.seed).points
    _ensure_parent(args.out)
    try:
        data.write_points_csv(args.out, pts)
    except OSError as exc:
        raise IoError(f"cannot write {args.out}: {exc}") from exc
    return 0


def cmd_check(args):
    from .checks import run_battery

    cfg = _load_config(args, args.params)
    with threadpool_limits(cfg["threads"]):
        model = _load_model(args, cfg)
        results = run_battery(model, seed=cfg["seed"], grid_res=args.grid_res)
    for r in results:
        print(r.line())
    if args.out:
        report = [{"name": r.name, "passed": r.passed, "value": r.value,
                   "tolerance": r.tolerance, "detail": r.detail} for r in results]
        _write_text(args.out, json.dumps(report, indent=2) + "\n")
    return 0 if all(r.passed for r in results) else 3


def _validate_points(geom, pts, path):
    if len(pts) and geom.manifold_error(pts).max() > 1e-6:
        raise InvalidValue(f"{path}: points are not on the {geom.kind}")


def _named_target(cfg, geom):
    from . import data

    source = cfg["data.source"]
    if source == "toy" and cfg["data.name"] == "wrapped_gaussian_mix":
        return data.WrappedGaussianMix().density
    if source == "vmf":
        return data.VmfMixtureSpec(cfg["data.vmf"]).density
    if source == "torus_harmonic":
        return data.TorusHarmonicDensity(geom.sdf, cfg["data.harmonic_k"]).density
    if source == "image":
        return data.ImageDensity(data.read_grayscale(cfg["data.path"])).density
    return None


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="mf", description="Moser flow density models")
    p.add_argument("--version", action="version",
                   version=f"mf {__version__} (build {build_hash()})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp, required=False):
        sp.add_argument("--config", required=required)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config key; may repeat")

    t = sub.add_parser("train", help="fit a model")
    with_config(t)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    t.add_argument("--seed", type=int)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="generate points by integrating the flow")
    with_config(s)
    s.add_argument("--params", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_sample)

    lp = sub.add_parser("logp", help="push-forward log-density at points")
    with_config(lp)
    lp.add_argument("--params", required=True)
    lp.add_argument("--points", required=True)
    lp.add_argument("--out", required=True)
    lp.set_defaults(fn=cmd_logp)

    e = sub.add_parser("eval", help="NLL, KL, TV and normalization metrics")
    with_config(e)
    e.add_argument("--params", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("raster", help="density image over a chart")
    with_config(r)
    r.add_argument("--params", required=True)
    r.add_argument("--res", type=int, default=512)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_raster)

    d = sub.add_parser("data", help="write a point file")
    with_config(d)
    d.add_argument("kind", choices=["toy", "vmf", "harmonic", "latlon"])
    d.add_argument("--name", default="wrapped_gaussian_mix")
    d.add_argument("--count", type=int, default=10000)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--k", type=int, default=1)
    d.add_argument("--input")
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_data)

    c = sub.add_parser("check", help="run the invariant battery on saved weights")
    with_config(c)
    c.add_argument("--params", required=True)
    c.add_argument("--grid-res", type=int, default=256)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_check)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except MoserFlowError as exc:
        print(f"mf: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mf: I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
