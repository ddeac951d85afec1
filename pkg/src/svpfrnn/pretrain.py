"""Pretraining the transition and observation nets on the analytic filter functions."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from svpfrnn.bootstrap_pf import SIGMA_MIN, pf_obs_likelihood
from svpfrnn.model import SvPfRnnModel, default_observation_net, default_transition_net
from svpfrnn.neural_core import DenseNet, OptimizerState, backward_cached, forward, forward_cached, opt_step
from svpfrnn.seeding import derive_seed
from svpfrnn.svmodel import SvParams, stationary_moments

log = logging.getLogger(__name__)


class PretrainDiverged(RuntimeError):
    pass


@dataclass
class PairSet:
    inputs: np.ndarray
    targets: np.ndarray
    input_ranges: tuple[tuple[float, float], tuple[float, float]]

    def __post_init__(self):
        if len(self.inputs) < 1 or self.inputs.shape != (len(self.targets), 2):
            raise ValueError("need N >= 1 input pairs with one target each")


@dataclass
class PretrainConfig:
    n_pairs: int = 50_000
    epochs: int = 200
    batch: int = 256
    lr: float = 1e-2
    width: float = 4.0  # training range half-width, in stationary std units
    noise_range: float = 4.0
    ridge_fraction: float = 0.5  # share of observation pairs drawn as x = p * z
    pair_floor: float = 0.05  # |p| floor for observation pairs; below it the net fits erratically
    grid: int = 200
    seed: int = 0


def transition_target(params: SvParams, p, eps):
    return params.mu + params.phi * (p - params.mu) + params.tau * eps


def state_range(params: SvParams, width: float = 4.0) -> tuple[float, float]:
    mean, std = stationary_moments(params)
    return mean - width * std, mean + width * std


def make_transition_pairs(params: SvParams, n: int, seed: int, width: float = 4.0,
                          noise_range: float = 4.0) -> PairSet:
    """Uniform ``(p, eps)`` over the state range and ``[-noise_range, noise_range]``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = state_range(params, width)
    p = rng.uniform(lo, hi, n)
    eps = rng.uniform(-noise_range, noise_range, n)
    return PairSet(np.stack([p, eps], axis=1), transition_target(params, p, eps),
                   ((lo, hi), (-noise_range, noise_range)))


def obs_x_max(params: SvParams, width: float = 4.0) -> float:
    lo, hi = state_range(params, width)
    return 4.0 * max(abs(lo), abs(hi))


def make_observation_pairs(params: SvParams, n: int, seed: int, width: float = 4.0,
                           ridge_fraction: float = 0.5, pair_floor: float = 0.05) -> PairSet:
    """``(p, x)`` pairs with target ``f_obs(p, x)``.

    ``p`` is uniform over the state range, pushed to ``|p| >= pair_floor``.
    A ``1 - ridge_fraction`` share of ``x`` is uniform on ``[-x_max, x_max]``;
    the rest is ``x = p * z`` with ``z ~ U(-4, 4)``, where the density is not negligible.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    lo, hi = state_range(params, width)
    x_max = obs_x_max(params, width)
    p = rng.uniform(lo, hi, n)
    floor = max(pair_floor, SIGMA_MIN)
    p = np.where(np.abs(p) < floor, np.where(p < 0, -floor, floor), p)
    x = rng.uniform(-x_max, x_max, n)
    ridge = rng.random(n) < ridge_fraction
    x[ridge] = p[ridge] * rng.uniform(-4.0, 4.0, ridge.sum())
    return PairSet(np.stack([p, x], axis=1), pf_obs_likelihood(p, x), ((lo, hi), (-x_max, x_max)))


def pretrain_network(net: DenseNet, pairs: PairSet, epochs: int, batch: int, seed: int,
                     lr: float = 1e-2) -> tuple[DenseNet, float]:
    """Fit ``net`` to ``pairs`` by minibatch Adam on the mean squared error.

    The learning rate follows a cosine decay to zero over ``epochs``. Returns the
    trained net and its final full-set training MSE.
    """
    if net.n_in != pairs.inputs.shape[1]:
        raise ValueError("net input dimension does not match the pairs")
    X, y = pairs.inputs, pairs.targets[:, None]

    def full_mse(params):
        return float(np.mean((forward(net.with_parameters(params), X) - y) ** 2))

    params = net.parameters.copy()
    initial = full_mse(params)
    if epochs == 0:
        return net, initial
    rng = np.random.default_rng(seed)
    state = OptimizerState.fresh(len(params), lr)
    n = len(X)
    check_at = max(1, epochs // 10)
    for ep in range(epochs):
        state = OptimizerState(state.first_moment, state.second_moment, state.step_count,
                               0.5 * lr * (1 + math.cos(math.pi * ep / epochs)))
        order = rng.permutation(n)
        for start in range(0, n, batch):
            b = order[start:start + batch]
            work = net.with_parameters(params)
            out, cache = forward_cached(work, X[b])
            grads, _ = backward_cached(work, cache, 2.0 * (out - y[b]) / len(b))
            params, state = opt_step(params, grads, state)
        if ep + 1 == check_at:
            current = full_mse(params)
            if not np.isfinite(current) or current > 10 * initial:
                raise PretrainDiverged(f"loss {current:.4g} > 10x initial {initial:.4g} after {ep + 1} epochs")
    return net.with_parameters(params), full_mse(params)


@dataclass
class GridReport:
    max_abs_error: float
    peak: float
    p_range: tuple[float, float]
    other_range: tuple[float, float]
    worst_point: tuple[float, float]

    @property
    def relative(self) -> float:
        return self.max_abs_error / self.peak if self.peak > 0 else math.inf


def verification_grid(fn_net: Callable, fn_true: Callable, p_range, other_range, n: int = 200):
    """Evaluate both functions on an ``n x n`` grid; returns ``(P, O, net_values, true_values)``."""
    P, O = np.meshgrid(np.linspace(*p_range, n), np.linspace(*other_range, n), indexing="ij")
    pts = np.stack([P.ravel(), O.ravel()], axis=1)
    return P, O, np.reshape(fn_net(pts), P.shape), np.reshape(fn_true(pts), P.shape)


def grid_report(net: DenseNet, fn_true: Callable, p_range, other_range, n: int = 200) -> GridReport:
    P, O, got, want = verification_grid(lambda z: forward(net, z), fn_true, p_range, other_range, n)
    err = np.abs(got - want)
    i = np.unravel_index(np.argmax(err), err.shape)
    return GridReport(float(err.max()), float(np.abs(want).max()), tuple(p_range), tuple(other_range),
                      (float(P[i]), float(O[i])))


def dump_grid(path: str | Path, net: DenseNet, fn_true: Callable, p_range, other_range, n: int = 200) -> None:
    P, O, got, want = verification_grid(lambda z: forward(net, z), fn_true, p_range, other_range, n)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["p", "input2", "network", "analytic"])
        for a, b, c, d in zip(P.ravel(), O.ravel(), got.ravel(), want.ravel()):
            w.writerow([f"{a:.17g}", f"{b:.17g}", f"{c:.17g}", f"{d:.17g}"])


@dataclass
class PretrainReport:
    transition_mse: float
    observation_mse: float
    transition_grid: GridReport
    observation_grid: GridReport
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transition_grid"]["relative"] = self.transition_grid.relative
        d["observation_grid"]["relative"] = self.observation_grid.relative
        return d


def pretrain_model(params: SvParams, cfg: PretrainConfig | None = None, alpha: float = 0.5,
                   K: int = 128) -> tuple[SvPfRnnModel, PretrainReport]:
    """Build default nets, fit each to its analytic function, and check them on grids."""
    cfg = cfg or PretrainConfig()
    trans_pairs = make_transition_pairs(params, cfg.n_pairs, derive_seed(cfg.seed, 0), cfg.width, cfg.noise_range)
    obs_pairs = make_observation_pairs(params, cfg.n_pairs, derive_seed(cfg.seed, 1), cfg.width,
                                       cfg.ridge_fraction, cfg.pair_floor)
    trans, trans_mse = pretrain_network(default_transition_net(derive_seed(cfg.seed, 2)), trans_pairs,
                                        cfg.epochs, cfg.batch, derive_seed(cfg.seed, 3), cfg.lr)
    obs, obs_mse = pretrain_network(default_observation_net(derive_seed(cfg.seed, 4)), obs_pairs,
                                    cfg.epochs, cfg.batch, derive_seed(cfg.seed, 5), cfg.lr)
    log.info("pretraining done: transition mse %.3g, observation mse %.3g", trans_mse, obs_mse)
    report = PretrainReport(
        trans_mse, obs_mse,
        grid_report(trans, lambda z: transition_target(params, z[:, 0], z[:, 1]), *trans_pairs.input_ranges, cfg.grid),
        grid_report(obs, lambda z: pf_obs_likelihood(z[:, 0], z[:, 1]), *obs_pairs.input_ranges, cfg.grid),
        asdict(cfg),
    )
    return SvPfRnnModel(trans, obs, params, alpha=alpha, K=K), report
