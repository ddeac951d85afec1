"""Differentiable particle filter with neural transition/observation functions.

Each step, for a batch of ``B`` sequences with ``K`` particles each:

1. ``a = trans_net(p_prev, eps)`` with ``eps ~ N(0, 1)`` fed in as an input,
2. ``l = obs_net(a, x_t)`` (non-negative), ``wt = normalize(w_prev * l)``,
3. soft resampling: indices ``k_j ~ q = alpha * wt + (1 - alpha) / K``,
   new particles ``a[k_j]`` with weights ``normalize(wt[k_j] / q[k_j])``,
4. estimate: weighted mean of the resampled cloud (plain mean with ``estimate="mean"``).

Index selection is not differentiated; gradients flow through particle values
and the ``wt / q`` ratios. :func:`backward_tape` is the hand-written reverse
pass over a recorded :class:`Tape`.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from svpfrnn.bootstrap_pf import ParticleEnsemble
from svpfrnn.neural_core import DenseNet, backward_cached, forward, forward_cached
from svpfrnn.svmodel import SvParams, VolPath, stationary_moments

FORMAT_VERSION = 1
ESTIMATES = ("weighted", "mean")


def default_transition_net(seed: int = 0) -> DenseNet:
    return DenseNet.init([2, 32, 32, 1], ["tanh", "tanh", "identity"], seed)


def default_observation_net(seed: int = 1) -> DenseNet:
    return DenseNet.init([2, 32, 32, 1], ["tanh", "tanh", "softplus"], seed)


@dataclass
class SvPfRnnModel:
    trans_net: DenseNet
    obs_net: DenseNet
    params: SvParams
    alpha: float = 0.5
    K: int = 128
    estimate: str = "weighted"
    # test hooks: replace a net's forward by an arbitrary vectorized function of (N, 2) inputs
    trans_fn: Callable | None = field(default=None, repr=False, compare=False)
    obs_fn: Callable | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        for name, net in (("trans_net", self.trans_net), ("obs_net", self.obs_net)):
            if net.n_in != 2 or net.n_out != 1:
                raise ValueError(f"{name} must map 2 inputs to 1 output")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.estimate not in ESTIMATES:
            raise ValueError(f"estimate must be one of {ESTIMATES}")

    def with_nets(self, trans_net: DenseNet | None = None, obs_net: DenseNet | None = None) -> "SvPfRnnModel":
        return replace(self, trans_net=trans_net or self.trans_net, obs_net=obs_net or self.obs_net)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "trans_net": self.trans_net.to_dict(),
                "obs_net": self.obs_net.to_dict(), "alpha": self.alpha, "K": self.K,
                "estimate": self.estimate, "params": self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "SvPfRnnModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')}")
        return cls(DenseNet.from_dict(d["trans_net"]), DenseNet.from_dict(d["obs_net"]),
                   SvParams(**d["params"]), float(d["alpha"]), int(d["K"]), d.get("estimate", "weighted"))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "SvPfRnnModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _pairs(a: np.ndarray, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return np.stack([a.ravel(), np.broadcast_to(b, a.shape).ravel()], axis=1)


def _eval_trans(model: SvPfRnnModel, states, noise) -> np.ndarray:
    X = _pairs(states, noise)
    out = model.trans_fn(X) if model.trans_fn is not None else forward(model.trans_net, X)
    return np.reshape(out, np.shape(states))


def _eval_obs(model: SvPfRnnModel, states, obs) -> np.ndarray:
    X = _pairs(states, obs)
    out = model.obs_fn(X) if model.obs_fn is not None else forward(model.obs_net, X)
    return np.reshape(out, np.shape(states))


def neural_transition(model: SvPfRnnModel, states, noise) -> np.ndarray:
    """Apply the transition net element-wise to ``(state_i, noise_i)``."""
    return _eval_trans(model, states, noise)


def neural_observation(model: SvPfRnnModel, states, obs: float) -> np.ndarray:
    """Apply the observation net element-wise to ``(state_i, obs)``."""
    return _eval_obs(model, states, obs)


def _inverse_cdf(probs: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Row-wise inverse-CDF sampling for ``(B, K)`` probabilities."""
    B, K = probs.shape
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    offsets = np.arange(B)[:, None]
    # one global search: row b lives in [b, b+1]
    idx = np.searchsorted((cdf + offsets).ravel(), (np.sort(uniforms, axis=1) + offsets).ravel(), side="right")
    return np.minimum(idx.reshape(B, K) - offsets * K, K - 1)


def _ratio(wt: np.ndarray, q: np.ndarray) -> np.ndarray:
    """``wt / q``; entries with ``q == 0`` (only possible at ``alpha == 1``) are never drawn and get 1."""
    return np.divide(wt, q, out=np.ones_like(wt), where=q > 0)


def soft_resample_weights(wt: np.ndarray, alpha: float, uniforms: np.ndarray):
    """Batched soft resampling. Returns ``(indices, q, ratio_per_source, new_weights)``."""
    K = wt.shape[-1]
    q = alpha * wt + (1.0 - alpha) / K
    idx = _inverse_cdf(q, uniforms)
    ratio = _ratio(wt, q)
    rs = np.take_along_axis(ratio, idx, axis=1)
    return idx, q, ratio, rs / rs.sum(axis=1, keepdims=True)


def soft_resample(ensemble: ParticleEnsemble, alpha: float, rng) -> tuple[ParticleEnsemble, np.ndarray]:
    """Draw ``K`` indices from ``alpha * w + (1 - alpha) / K`` and reweight by ``w / q``.

    Consumes ``rng.random(K)``.
    """
    K = ensemble.K
    idx, _, _, w_new = soft_resample_weights(ensemble.weights[None, :], alpha, rng.random(K)[None, :])
    idx = idx[0]
    return ParticleEnsemble(ensemble.states[idx], w_new[0]), idx


@dataclass
class Tape:
    """Per-step quantities of a batched forward run, enough to replay or differentiate it."""
    p_prev: list = field(default_factory=list)
    w_prev: list = field(default_factory=list)
    eps: list = field(default_factory=list)
    x: list = field(default_factory=list)
    moved: list = field(default_factory=list)
    lik: list = field(default_factory=list)
    wt: list = field(default_factory=list)
    q: list = field(default_factory=list)
    idx: list = field(default_factory=list)
    p_new: list = field(default_factory=list)
    w_new: list = field(default_factory=list)
    degenerate: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.idx)


@dataclass
class Replay:
    """Fixed noise ``(B, T, K)`` and indices ``(B, T, K)`` plus the initial cloud ``(B, K)``."""
    init: np.ndarray
    eps: np.ndarray
    idx: np.ndarray


def initial_cloud(model: SvPfRnnModel, B: int, rng) -> tuple[np.ndarray, np.ndarray]:
    mean, std = stationary_moments(model.params)
    p = mean + std * rng.standard_normal((B, model.K))
    return p, np.full((B, model.K), 1.0 / model.K)


def run_window(model: SvPfRnnModel, obs: np.ndarray, p: np.ndarray, w: np.ndarray, rng=None,
               replay: Replay | None = None, t0: int = 0, tape: Tape | None = None):
    """Advance the batched filter over ``obs`` of shape ``(B, W)``.

    Randomness per step: ``rng.standard_normal((B, K))`` then ``rng.random((B, K))``,
    unless ``replay`` supplies noise and indices (then ``rng`` is unused).
    Returns ``(estimates (B, W), p, w)``; appends to ``tape`` when given.
    """
    B, W = obs.shape
    K = model.K
    est = np.empty((B, W))
    for s in range(W):
        t = t0 + s
        eps = replay.eps[:, t, :] if replay is not None else rng.standard_normal((B, K))
        moved = _eval_trans(model, p, eps)
        lik = _eval_obs(model, moved, obs[:, s:s + 1])
        u = w * lik
        total = u.sum(axis=1, keepdims=True)
        bad = ~(np.isfinite(total) & (total > 0))[:, 0]
        wt = np.divide(u, total, out=np.full_like(u, 1.0 / K), where=~bad[:, None])
        q = model.alpha * wt + (1.0 - model.alpha) / K
        if replay is not None:
            idx = replay.idx[:, t, :]
        else:
            idx = _inverse_cdf(q, rng.random((B, K)))
        rs = np.take_along_axis(_ratio(wt, q), idx, axis=1)
        rsum = rs.sum(axis=1, keepdims=True)
        # every draw hit a zero-weight particle (possible for alpha < 1): restart uniform
        w_new = np.divide(rs, rsum, out=np.full_like(rs, 1.0 / K), where=rsum > 0)
        p_new = np.take_along_axis(moved, idx, axis=1)
        est[:, s] = (w_new * p_new).sum(axis=1) if model.estimate == "weighted" else p_new.mean(axis=1)
        if tape is not None:
            for name, val in (("p_prev", p), ("w_prev", w), ("eps", eps), ("x", obs[:, s]),
                              ("moved", moved), ("lik", lik), ("wt", wt), ("q", q), ("idx", idx),
                              ("p_new", p_new), ("w_new", w_new), ("degenerate", bad)):
                getattr(tape, name).append(val)
        p, w = p_new, w_new
    return est, p, w


def run_batch(model: SvPfRnnModel, obs: np.ndarray, seed: int | None = None,
              replay: Replay | None = None, record: bool = False):
    """Filter a ``(B, T)`` batch from the stationary initial cloud.

    Returns ``(estimates, tape)``; ``tape`` is ``None`` unless ``record``.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    rng = np.random.default_rng(seed)
    if replay is not None:
        p, w = replay.init.copy(), np.full_like(replay.init, 1.0 / model.K)
    else:
        p, w = initial_cloud(model, obs.shape[0], rng)
    tape = Tape() if record else None
    est, _, _ = run_window(model, obs, p, w, rng, replay, 0, tape)
    return est, tape


@dataclass
class TraceStep:
    pre_resample: ParticleEnsemble
    post_resample: ParticleEnsemble
    estimate: float
    noise_draws: np.ndarray
    sampled_indices: np.ndarray


def forward_sequence(model: SvPfRnnModel, path: VolPath | np.ndarray, seed: int,
                     record: bool = False):
    """Run the filter over one path. Returns ``(estimates, trace)``; ``trace`` is ``None`` unless ``record``."""
    obs = path.observations if isinstance(path, VolPath) else np.asarray(path, dtype=float)
    est, tape = run_batch(model, obs[None, :], seed, record=record)
    if not record:
        return est[0], None
    trace = [TraceStep(ParticleEnsemble(tape.moved[t][0], tape.wt[t][0]),
                       ParticleEnsemble(tape.p_new[t][0], tape.w_new[t][0]),
                       float(est[0, t]), tape.eps[t][0], tape.idx[t][0])
             for t in range(len(tape))]
    return est[0], trace


def replay_from_tape(tape: Tape) -> Replay:
    return Replay(init=tape.p_prev[0].copy(), eps=np.stack(tape.eps, axis=1), idx=np.stack(tape.idx, axis=1))


def trace_to_csv(trace: list[TraceStep], path: str | Path, truths: np.ndarray | None = None) -> None:
    """One row per particle per step, for particle-cloud plots."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "particle", "state", "weight", "estimate", "truth"])
        for t, step in enumerate(trace):
            truth = "" if truths is None else f"{truths[t]:.17g}"
            for i in range(step.post_resample.K):
                w.writerow([t, i, f"{step.post_resample.states[i]:.17g}",
                            f"{step.post_resample.weights[i]:.17g}", f"{step.estimate:.17g}", truth])


def _scatter(values: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Adjoint of ``take_along_axis(src, idx, axis=1)`` for ``(B, K)`` arrays."""
    B, K = idx.shape
    flat = (idx + np.arange(B)[:, None] * K).ravel()
    return np.bincount(flat, weights=values.ravel(), minlength=B * K).reshape(B, K)


def backward_tape(model: SvPfRnnModel, tape: Tape, grad_est: np.ndarray,
                  grad_particles: list | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass over ``tape`` (one window; nothing flows into the window's initial cloud).

    ``grad_est``: ``(B, W)`` loss gradient w.r.t. each estimate.
    ``grad_particles``: optional per-step ``(g_p, g_w)`` loss gradients w.r.t. the
    resampled particle states and weights.
    Returns accumulated gradients for ``(trans_net.parameters, obs_net.parameters)``.
    """
    g_trans = np.zeros_like(model.trans_net.parameters)
    g_obs = np.zeros_like(model.obs_net.parameters)
    alpha, K = model.alpha, model.K
    G_p = np.zeros_like(tape.p_new[0])
    G_w = np.zeros_like(tape.w_new[0])
    for t in range(len(tape) - 1, -1, -1):
        p_new, w_new = tape.p_new[t], tape.w_new[t]
        ge = grad_est[:, t:t + 1]
        if model.estimate == "weighted":
            G_p = G_p + ge * w_new
            G_w = G_w + ge * p_new
        else:
            G_p = G_p + ge / K
        if grad_particles is not None and grad_particles[t] is not None:
            G_p = G_p + grad_particles[t][0]
            G_w = G_w + grad_particles[t][1]

        # w_new = rs / sum(rs), with rs = (wt / q)[idx]
        rs = np.take_along_axis(_ratio(tape.wt[t], tape.q[t]), tape.idx[t], axis=1)
        R = rs.sum(axis=1, keepdims=True)
        G_rs = np.divide(G_w - (G_w * w_new).sum(axis=1, keepdims=True), R, out=np.zeros_like(rs), where=R > 0)
        G_ratio = _scatter(G_rs, tape.idx[t])
        G_a = _scatter(G_p, tape.idx[t])

        # d(wt/q)/dwt with q = alpha * wt + (1 - alpha) / K
        q = tape.q[t]
        G_wt = G_ratio * np.divide((1.0 - alpha) / K, q**2, out=np.zeros_like(q), where=q > 0)
        G_wt[tape.degenerate[t]] = 0.0

        wt, lik, w_prev = tape.wt[t], tape.lik[t], tape.w_prev[t]
        S = (w_prev * lik).sum(axis=1, keepdims=True)
        S = np.where(S > 0, S, 1.0)
        G_u = (G_wt - (G_wt * wt).sum(axis=1, keepdims=True)) / S
        G_wprev = G_u * lik
        G_lik = G_u * w_prev

        moved = tape.moved[t]
        _, cache = forward_cached(model.obs_net, _pairs(moved, tape.x[t][:, None]))
        gp, gx = backward_cached(model.obs_net, cache, G_lik.reshape(-1, 1))
        g_obs += gp
        G_a = G_a + gx[:, 0].reshape(moved.shape)

        _, cache = forward_cached(model.trans_net, _pairs(tape.p_prev[t], tape.eps[t]))
        gp, gx = backward_cached(model.trans_net, cache, G_a.reshape(-1, 1))
        g_trans += gp
        G_p = gx[:, 0].reshape(moved.shape)
        G_w = G_wprev
    return g_trans, g_obs


def particle_spread(tape: Tape) -> float:
    """Mean over steps and sequences of the weighted std of the resampled cloud."""
    spreads = []
    for p, w in zip(tape.p_new, tape.w_new):
        m = (w * p).sum(axis=1, keepdims=True)
        spreads.append(np.sqrt((w * (p - m) ** 2).sum(axis=1)))
    return float(np.mean(spreads))
