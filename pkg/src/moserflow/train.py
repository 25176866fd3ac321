"""Adam training loop over the Moser loss."""

import csv
import logging
import os
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionMismatch, EmptyDataset, InvalidValue, NonFiniteLoss

log = logging.getLogger(__name__)

METRIC_FIELDS = ["iter", "wall_clock_s", "nll_term", "penalty_minus", "penalty_plus", "total"]


@dataclass
class TrainConfig:
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    iters: int = 1000
    data_batch: int = 1024
    uniform_batch: int = 1024
    seed: int = 0
    checkpoint_every: int = 0
    deterministic: bool = True
    with_replacement: bool = False
    lr_schedule: str = "constant"  # or "cosine": decays to lr_final over iters
    lr_final: float = 0.0

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidValue(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")

    def lr_at(self, it):
        if self.lr_schedule == "constant" or self.iters <= 1:
            return self.lr
        frac = it / (self.iters - 1)
        return self.lr_final + 0.5 * (self.lr - self.lr_final) * (1.0 + np.cos(np.pi * frac))


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, p):
        return cls(np.zeros(p), np.zeros(p), 0)


def adam_step(state, params, grad, cfg, lr=None):
    """One bias-corrected Adam update; returns a new state and new params."""
    lr = cfg.lr if lr is None else lr
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if not (params.shape == grad.shape == state.m.shape == state.v.shape):
        raise DimensionMismatch("params, grad and optimizer state must have equal length")
    t = state.t + 1
    m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad
    v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad * grad
    m_hat = m / (1.0 - cfg.adam_beta1 ** t)
    v_hat = v / (1.0 - cfg.adam_beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
    return OptimizerState(m, v, t), new_params


class _Batcher:
    """Data batches: full batch, with replacement, or epoch-wise permutations."""

    def __init__(self, dataset, size, rng, with_replacement):
        self.dataset = dataset
        self.points = dataset.train_points()
        self.size = size
        self.rng = rng
        self.with_replacement = with_replacement
        self._perm = None
        self._pos = 0

    def next(self):
        if self.dataset.sampler is not None:
            return self.dataset.sampler(self.rng, self.size or len(self.points))
        n = len(self.points)
        if self.size == 0 or self.size >= n:
            return self.points
        if self.with_replacement:
            return self.points[self.rng.integers(0, n, size=self.size)]
        if self._perm is None or self._pos + self.size > n:
            self._perm = self.rng.permutation(n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.size]
        self._pos += self.size
        return self.points[idx]


@dataclass
class TrainResult:
    model: object
    metrics: list = field(default_factory=list)
    iter_times: np.ndarray = None
    wall_clock: np.ndarray = None


def train(model, dataset, cfg, out_dir=None, callback=None):
    """Optimize ``model.net`` in place on ``dataset``.

    Each iteration draws a data batch and a fresh uniform batch, evaluates the
    loss and its gradient, and takes one Adam step.  With ``out_dir`` set,
    ``metrics.csv``, ``timing.csv`` and ``params_####.mfnt`` checkpoints are
    written there.
    """
    if len(dataset.train_points()) == 0 and dataset.sampler is None:
        raise EmptyDataset("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    batcher = _Batcher(dataset, cfg.data_batch, rng, cfg.with_replacement)
    geom = model.geometry
    theta = model.net.theta
    state = OptimizerState.zeros(theta.size)
    result = TrainResult(model)
    iter_times = np.zeros(cfg.iters)
    wall = np.zeros(cfg.iters)

    writer = timing = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(out_dir, "metrics.csv"), "w", newline="")
        timing_fh = open(os.path.join(out_dir, "timing.csv"), "w", newline="")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRIC_FIELDS)
        timing = csv.writer(timing_fh)
        timing.writerow(["iter", "wall_clock_s", "iter_time_s"])

    start = time.perf_counter()
    try:
        for it in range(cfg.iters):
            t0 = time.perf_counter()
            data = batcher.next()
            uniform = geom.sample_uniform(rng, cfg.uniform_batch)
            terms, grad = model.loss_and_grad(data, uniform)
            if not np.isfinite(terms["total"]):
                raise NonFiniteLoss(it, terms["total"])
            state, theta = adam_step(state, theta, grad, cfg, cfg.lr_at(it))
            model.net.set_theta(theta)
            t1 = time.perf_counter()
            iter_times[it] = t1 - t0
            wall[it] = t1 - start
            row = {"iter": it, "wall_clock_s": 0.0 if cfg.deterministic else wall[it],
                   "nll_term": terms["nll"], "penalty_minus": terms["penalty_minus"],
                   "penalty_plus": terms["penalty_plus"], "total": terms["total"]}
            result.metrics.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
                timing.writerow([it, _fmt(wall[it]), _fmt(iter_times[it])])
                if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
                    model.net.save(os.path.join(out_dir, f"params_{it + 1:04d}.mfnt"))
            if callback is not None:
                callback(it, terms)
            if it % 500 == 0:
                log.info("iter %d loss %.6f", it, terms["total"])
    finally:
        if writer is not None:
            metrics_fh.close()
            timing_fh.close()
    if out_dir is not None:
        model.net.save(os.path.join(out_dir, "params.mfnt"))
    result.iter_times = iter_times
    result.wall_clock = wall
    return result


def _fmt(x):
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def config_dict(cfg):
    return asdict(cfg)
