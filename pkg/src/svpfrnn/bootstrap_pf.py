"""Bootstrap (SIR) particle filter for the Taylor SV model."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from svpfrnn.svmodel import SvParams, VolPath, stationary_moments

SIGMA_MIN = 1e-6
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class ParticleEnsemble:
    states: np.ndarray
    weights: np.ndarray

    @property
    def K(self) -> int:
        return len(self.states)

    def check(self, atol: float = 1e-12) -> None:
        if self.states.shape != self.weights.shape or self.K < 1:
            raise ValueError("states and weights must have equal length >= 1")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > atol:
            raise ValueError("weights must be non-negative and sum to 1")

    @classmethod
    def uniform(cls, states: np.ndarray) -> "ParticleEnsemble":
        states = np.asarray(states, dtype=float)
        return cls(states, np.full(len(states), 1.0 / len(states)))


@dataclass
class FilterOutput:
    estimates: np.ndarray
    ensembles: list[ParticleEnsemble] | None = None
    degenerate_steps: list[int] = field(default_factory=list)

    def to_csv(self, path: str | Path, truths: np.ndarray | None = None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "estimate", "truth"])
            for t, e in enumerate(self.estimates):
                truth = "" if truths is None else f"{truths[t]:.17g}"
                w.writerow([t, f"{e:.17g}", truth])

    def particles_to_csv(self, path: str | Path) -> None:
        if self.ensembles is None:
            raise ValueError("filter was run without record=True")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "particle", "state", "weight"])
            for t, ens in enumerate(self.ensembles):
                for i in range(ens.K):
                    w.writerow([t, i, f"{ens.states[i]:.17g}", f"{ens.weights[i]:.17g}"])


def pf_transition(state, noise, params: SvParams):
    """``mu + phi * (state - mu) + noise``; the caller draws ``noise ~ N(0, tau)``."""
    return params.mu + params.phi * (state - params.mu) + noise


def pf_obs_likelihood(state, obs, floor: float = SIGMA_MIN):
    """Density of ``obs`` under ``N(0, state**2)``, with ``|state|`` clamped at ``floor``."""
    sd = np.maximum(np.abs(state), floor)
    return _INV_SQRT_2PI / sd * np.exp(-0.5 * (np.asarray(obs) / sd) ** 2)


def multinomial_indices(weights: np.ndarray, uniforms: np.ndarray) -> np.ndarray:
    """Inverse-CDF multinomial draw: sorted uniforms mapped through the weight CDF."""
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, np.sort(uniforms), side="right")
    return np.minimum(idx, len(weights) - 1)


def sir_step(ensemble: ParticleEnsemble, obs: float, params: SvParams,
             rng) -> tuple[ParticleEnsemble, bool]:
    """One propagate / reweight / normalize / resample step.

    Consumes ``rng.standard_normal(K)`` (transition noise) then ``rng.random(K)``
    (resampling uniforms). Returns the resampled ensemble and whether every
    unnormalized weight underflowed to zero (weights then fall back to uniform).
    """
    K = ensemble.K
    moved = pf_transition(ensemble.states, params.tau * rng.standard_normal(K), params)
    w = ensemble.weights * pf_obs_likelihood(moved, obs)
    total = w.sum()
    degenerate = not (total > 0 and math.isfinite(total))
    w = np.full(K, 1.0 / K) if degenerate else w / total
    idx = multinomial_indices(w, rng.random(K))
    return ParticleEnsemble(moved[idx], np.full(K, 1.0 / K)), degenerate


def pf_estimate(ensemble: ParticleEnsemble) -> float:
    return float(np.dot(ensemble.weights, ensemble.states))


def initial_ensemble(params: SvParams, K: int, rng) -> ParticleEnsemble:
    mean, std = stationary_moments(params)
    return ParticleEnsemble.uniform(mean + std * rng.standard_normal(K))


def run_filter(path: VolPath | np.ndarray, K: int, params: SvParams, seed: int,
               record: bool = False) -> FilterOutput:
    """Filter one observation sequence; the estimate is taken after each resampling."""
    if K < 1:
        raise ValueError("K must be >= 1")
    obs = path.observations if isinstance(path, VolPath) else np.asarray(path, dtype=float)
    rng = np.random.default_rng(seed)
    ens = initial_ensemble(params, K, rng)
    estimates = np.empty(len(obs))
    recorded = [] if record else None
    degenerate_steps = []
    for t, x in enumerate(obs):
        ens, degenerate = sir_step(ens, x, params, rng)
        if degenerate:
            degenerate_steps.append(t)
        estimates[t] = pf_estimate(ens)
        if record:
            recorded.append(ens)
    return FilterOutput(estimates, recorded, degenerate_steps)
