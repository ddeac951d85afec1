"""End-to-end training of the neural particle filter by truncated BPTT."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from svpfrnn.model import SvPfRnnModel, Tape, TraceStep, backward_tape, initial_cloud, particle_spread, run_batch, run_window
from svpfrnn.neural_core import OptimizerState, opt_step
from svpfrnn.seeding import derive_seed
from svpfrnn.svmodel import Dataset, SvParams, stationary_moments

log = logging.getLogger(__name__)

LOSSES = ("mse", "inverse_density")
DENSITY_FORMS = ("cloud", "particle")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainConfig:
    loss_kind: str = "inverse_density"
    epochs: int = 3
    batch_size: int = 50
    lr: float = 1e-3
    tbptt_window: int = 50
    density_floor: float = 1e-3
    density_scale: str = "std"  # "std": N(mu, tau^2); "variance": N(mu, tau)
    density_form: str = "cloud"  # "cloud": weighted estimate error; "particle": per-particle squared error
    seed: int = 0
    particles: int | None = None  # train with a different K than the model's
    test_paths: int | None = 100  # held-out paths scored after each epoch (None: all)
    clip_norm: float | None = 10.0  # per-net gradient norm cap; None disables

    def __post_init__(self):
        if self.loss_kind not in LOSSES:
            raise ValueError(f"loss_kind must be one of {LOSSES}")
        if self.batch_size < 1 or self.tbptt_window < 1 or self.density_floor <= 0:
            raise ValueError("batch_size, tbptt_window >= 1 and density_floor > 0 required")
        if self.density_scale not in ("std", "variance"):
            raise ValueError("density_scale must be 'std' or 'variance'")
        if self.density_form not in DENSITY_FORMS:
            raise ValueError(f"density_form must be one of {DENSITY_FORMS}")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    test_mse: float
    seconds: float
    particle_spread: float = float("nan")
    collapsed: bool = False


@dataclass
class TrainStats:
    entries: list[EpochStats] = field(default_factory=list)

    def to_csv(self, path: str | Path, timings: bool = True) -> None:
        """Per-epoch rows; ``timings=False`` drops the wall-clock column so reruns compare byte-equal."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "test_mse"] + (["seconds"] if timings else []))
            for e in self.entries:
                row = [e.epoch, f"{e.loss:.17g}", f"{e.test_mse:.17g}"]
                w.writerow(row + ([f"{e.seconds:.3f}"] if timings else []))


def loss_mse(estimates, truths) -> float:
    estimates, truths = np.asarray(estimates, dtype=float), np.asarray(truths, dtype=float)
    if estimates.shape != truths.shape:
        raise ValueError("estimates and truths must have equal length")
    return float(np.mean((estimates - truths) ** 2))


def prior_density(p, params: SvParams, scale: str = "std"):
    """Gaussian approximation of the state's unconditional density, centred at ``mu``."""
    sd = params.tau if scale == "std" else math.sqrt(params.tau)
    return np.exp(-0.5 * ((p - params.mu) / sd) ** 2) / (math.sqrt(2 * math.pi) * sd), sd


def _inverse_density_terms(p, w, y, params: SvParams, floor: float, scale: str):
    """Per-particle ``(p - y)^2 / max(f(p), floor)`` and its derivative in ``p``."""
    f, sd = prior_density(p, params, scale)
    denom = np.maximum(f, floor)
    err = p - y
    c = err**2 / denom
    df = np.where(f > floor, -f * (p - params.mu) / sd**2, 0.0)
    dc = 2 * err / denom - err**2 / denom**2 * df
    return c, dc


def inverse_density_weight(states, weights, params: SvParams, floor: float = 1e-3,
                           scale: str = "std"):
    """``sum_i w_i / max(f(p_i), floor)`` over the last axis: the cloud's mean inverse prior density."""
    f, _ = prior_density(np.asarray(states, dtype=float), params, scale)
    return np.sum(np.asarray(weights) / np.maximum(f, floor), axis=-1)


def loss_inverse_density(trace: list[TraceStep], truths, params: SvParams, floor: float = 1e-3,
                         scale: str = "std", form: str = "cloud") -> float:
    """Inverse-prior-density weighted loss, averaged over steps.

    ``form="cloud"``: each particle carries its weight ``w_i / max(f(p_i), floor)``
    of the step's squared estimate error, i.e. ``rho_t * (yhat_t - y_t)^2`` with
    ``rho_t`` the cloud's mean inverse density (held constant under differentiation).
    ``form="particle"``: ``sum_i w_i (p_i - y_t)^2 / max(f(p_i), floor)``.
    """
    truths = np.asarray(truths, dtype=float)
    total = 0.0
    for step, y in zip(trace, truths):
        p, w = step.post_resample.states, step.post_resample.weights
        if form == "cloud":
            total += float(inverse_density_weight(p, w, params, floor, scale)) * (step.estimate - y) ** 2
        else:
            c, _ = _inverse_density_terms(p, w, y, params, floor, scale)
            total += float(np.dot(w, c))
    return total / len(truths)


def window_loss(model: SvPfRnnModel, tape: Tape, est: np.ndarray, truths: np.ndarray, cfg: TrainConfig,
                norm: float):
    """Loss summed over a window (divided by ``norm``) and its gradients for :func:`backward_tape`."""
    diff = est - truths
    if cfg.loss_kind == "mse":
        return float(np.sum(diff**2) / norm), 2 * diff / norm, None
    if cfg.density_form == "cloud":
        rho = np.stack([inverse_density_weight(p, w, model.params, cfg.density_floor, cfg.density_scale)
                        for p, w in zip(tape.p_new, tape.w_new)], axis=1)
        return float(np.sum(rho * diff**2) / norm), 2 * rho * diff / norm, None
    total = 0.0
    gp = []
    for t in range(len(tape)):
        p, w = tape.p_new[t], tape.w_new[t]
        c, dc = _inverse_density_terms(p, w, truths[:, t:t + 1], model.params, cfg.density_floor, cfg.density_scale)
        total += float(np.sum(w * c))
        gp.append((w * dc / norm, c / norm))
    return total / norm, np.zeros_like(est), gp


def sequence_gradients(model: SvPfRnnModel, obs: np.ndarray, truths: np.ndarray, cfg: TrainConfig,
                       seed: int | None = None, replay=None):
    """Loss and parameter gradients for a ``(B, T)`` batch, truncated every ``cfg.tbptt_window`` steps.

    The loss is averaged over sequences and steps. Returns ``(loss, g_trans, g_obs, estimates)``.
    """
    B, T = obs.shape
    rng = np.random.default_rng(seed)
    if replay is not None:
        p, w = replay.init.copy(), np.full_like(replay.init, 1.0 / model.K)
    else:
        p, w = initial_cloud(model, B, rng)
    norm = B * T
    loss = 0.0
    g_trans = np.zeros_like(model.trans_net.parameters)
    g_obs = np.zeros_like(model.obs_net.parameters)
    estimates = np.empty((B, T))
    for start in range(0, T, cfg.tbptt_window):
        stop = min(T, start + cfg.tbptt_window)
        tape = Tape()
        est, p, w = run_window(model, obs[:, start:stop], p, w, rng, replay, start, tape)
        estimates[:, start:stop] = est
        value, g_est, g_part = window_loss(model, tape, est, truths[:, start:stop], cfg, norm)
        if not math.isfinite(value):
            bad = np.argwhere(~np.isfinite(est))
            where = f"sequence {bad[0][0]}, step {start + bad[0][1]}" if len(bad) else f"window at step {start}"
            raise NonFiniteLoss(f"non-finite loss at {where}")
        loss += value
        gt, go = backward_tape(model, tape, g_est, g_part)
        g_trans += gt
        g_obs += go
    return loss, g_trans, g_obs, estimates


def _clip(g: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return g
    n = float(np.linalg.norm(g))
    return g * (max_norm / n) if n > max_norm else g


@dataclass
class TrainState:
    trans_opt: OptimizerState
    obs_opt: OptimizerState
    epoch: int = 0

    @classmethod
    def fresh(cls, model: SvPfRnnModel, lr: float) -> "TrainState":
        return cls(OptimizerState.fresh(len(model.trans_net.parameters), lr),
                   OptimizerState.fresh(len(model.obs_net.parameters), lr))


def evaluate_mse(model: SvPfRnnModel, dataset: Dataset, seed: int, batch: int = 100) -> float:
    """Mean per-path MSE of the filter's estimates over ``dataset``."""
    Y, X = dataset.states(), dataset.observations()
    mses = []
    for b, start in enumerate(range(0, len(Y), batch)):
        est, _ = run_batch(model, X[start:start + batch], derive_seed(seed, b))
        mses.append(np.mean((est - Y[start:start + batch]) ** 2, axis=1))
    return float(np.mean(np.concatenate(mses)))


def collapse_check(model: SvPfRnnModel, probe: np.ndarray, seed: int) -> tuple[float, bool]:
    """Mean spread of the resampled clouds on ``probe`` observations; collapsed if < 5% of the stationary std."""
    _, tape = run_batch(model, np.atleast_2d(probe), seed, record=True)
    spread = particle_spread(tape)
    return spread, spread < 0.05 * stationary_moments(model.params)[1]


def train_epoch(model: SvPfRnnModel, dataset: Dataset, cfg: TrainConfig,
                state: TrainState | None = None) -> tuple[SvPfRnnModel, EpochStats, TrainState]:
    """One pass over the train split: one Adam step per batch for each net."""
    state = state or TrainState.fresh(model, cfg.lr)
    epoch = state.epoch
    t0 = time.perf_counter()
    train = dataset.split("train")
    if len(train) == 0:
        raise ValueError("dataset has no train paths")
    Y, X = train.states(), train.observations()
    order = np.random.default_rng(derive_seed(cfg.seed, epoch, 0)).permutation(len(Y))
    work = replace(model, K=cfg.particles or model.K)
    trans_opt = replace(state.trans_opt, lr=cfg.lr)
    obs_opt = replace(state.obs_opt, lr=cfg.lr)
    losses = []
    for b, start in enumerate(range(0, len(order), cfg.batch_size)):
        rows = order[start:start + cfg.batch_size]
        try:
            loss, g_t, g_o, _ = sequence_gradients(work, X[rows], Y[rows], cfg, derive_seed(cfg.seed, epoch, 1, b))
        except NonFiniteLoss as exc:
            ids = [train.path_ids[r] for r in rows]
            raise NonFiniteLoss(f"epoch {epoch} batch {b} (path ids {ids[0]}..{ids[-1]}): {exc}") from exc
        losses.append(loss)
        new_t, trans_opt = opt_step(work.trans_net.parameters, _clip(g_t, cfg.clip_norm), trans_opt)
        new_o, obs_opt = opt_step(work.obs_net.parameters, _clip(g_o, cfg.clip_norm), obs_opt)
        work = work.with_nets(work.trans_net.with_parameters(new_t), work.obs_net.with_parameters(new_o))
    trained = replace(work, K=model.K)

    test = dataset.split("test")
    if cfg.test_paths is not None:
        test = test.subset(range(min(cfg.test_paths, len(test))))
    test_mse = evaluate_mse(trained, test, derive_seed(cfg.seed, epoch, 2)) if len(test) else float("nan")
    probe = (test if len(test) else train).paths[0].observations
    spread, collapsed = collapse_check(trained, probe, derive_seed(cfg.seed, epoch, 3))
    if collapsed:
        log.warning("epoch %d: particle clouds collapsed (mean spread %.4f)", epoch, spread)
    stats = EpochStats(epoch, float(np.mean(losses)), test_mse, time.perf_counter() - t0, spread, collapsed)
    log.info("epoch %d loss %.5f test_mse %.5f spread %.4f (%.1fs)", epoch, stats.loss, test_mse, spread, stats.seconds)
    return trained, stats, TrainState(trans_opt, obs_opt, epoch + 1)


def fit(model: SvPfRnnModel, dataset: Dataset, cfg: TrainConfig, out_dir: str | Path | None = None):
    """Train for ``cfg.epochs``; returns ``(best_model_on_test, stats)``.

    With ``out_dir``, writes ``epoch_<n>.json`` checkpoints, ``best_model.json``
    and ``train_stats.csv``.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = TrainState.fresh(model, cfg.lr)
    stats = TrainStats()
    best, best_mse = model, math.inf
    for _ in range(cfg.epochs):
        model, entry, state = train_epoch(model, dataset, cfg, state)
        stats.entries.append(entry)
        if out is not None:
            model.save(out / f"epoch_{entry.epoch}.json")
        if entry.test_mse < best_mse or not math.isfinite(best_mse):
            best, best_mse = model, entry.test_mse
    if out is not None:
        best.save(out / "best_model.json")
        stats.to_csv(out / "train_stats.csv")
    return best, stats


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
