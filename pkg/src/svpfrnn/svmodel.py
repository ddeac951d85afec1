"""Taylor stochastic-volatility generator and dataset construction.

The latent state follows an AR(1) recurrence around ``mu``::

    Y_t = mu + phi * (Y_{t-1} - mu) + tau * z_t,     z_t ~ N(0, 1)

and returns are emitted as ``X_t = Y_t * e_t`` (``emission="linear"``, the
default, consistent with the filter likelihood) or ``X_t = Y_t**2 * e_t``
(``emission="squared"``). ``Y_0`` is drawn from the stationary law.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from svpfrnn.seeding import derive_seed

EMISSIONS = ("linear", "squared")
SPLITS = ("train", "test", "eval")


@dataclass(frozen=True)
class SvParams:
    mu: float
    phi: float
    tau: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.mu, self.phi, self.tau)):
            raise ValueError(f"non-finite SV parameters: {self}")
        if abs(self.phi) >= 1:
            raise ValueError(f"|phi| must be < 1 for a stationary model, got {self.phi}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")

    def to_dict(self) -> dict:
        return {"mu": self.mu, "phi": self.phi, "tau": self.tau}


PAPER_PARAMS = SvParams(mu=-0.6558, phi=0.9807, tau=0.1489)


def stationary_moments(params: SvParams) -> tuple[float, float]:
    """Mean and standard deviation of the stationary AR(1) law."""
    if abs(params.phi) >= 1:
        raise ValueError("stationary moments need |phi| < 1")
    return params.mu, params.tau / math.sqrt(1.0 - params.phi**2)


@dataclass(frozen=True)
class VolPath:
    states: np.ndarray
    observations: np.ndarray
    seed: int

    def __post_init__(self):
        if self.states.ndim != 1 or self.states.shape != self.observations.shape or len(self.states) < 1:
            raise ValueError("states and observations must be 1-d arrays of equal length >= 1")

    @property
    def T(self) -> int:
        return len(self.states)


def simulate_path(params: SvParams, T: int, seed: int, emission: str = "linear",
                  initial_state: float | None = None) -> VolPath:
    """Simulate one path of length ``T``.

    Draw order from ``default_rng(seed)``: one normal for ``Y_0``, ``T`` normals
    for the state noise, then ``T`` normals for the return noise.
    ``initial_state`` overrides the stationary draw (the normal is still consumed).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if emission not in EMISSIONS:
        raise ValueError(f"unknown emission {emission!r}")
    rng = np.random.default_rng(seed)
    mean, std = stationary_moments(params)
    z0 = rng.standard_normal()
    state_noise = rng.standard_normal(T)
    obs_noise = rng.standard_normal(T)

    y = mean + std * z0 if initial_state is None else float(initial_state)
    mu, phi, tau = params.mu, params.phi, params.tau
    states = np.empty(T)
    for t in range(T):
        y = mu + phi * (y - mu) + tau * state_noise[t]
        states[t] = y
    scale = states if emission == "linear" else states**2
    return VolPath(states=states, observations=scale * obs_noise, seed=int(seed))


@dataclass
class Dataset:
    paths: list[VolPath]
    splits: list[str]
    params: SvParams
    T: int
    seed: int
    emission: str = "linear"
    path_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if len(self.paths) != len(self.splits):
            raise ValueError("one split label per path")
        if not self.path_ids:
            self.path_ids = list(range(len(self.paths)))
        bad = set(self.splits) - set(SPLITS)
        if bad:
            raise ValueError(f"unknown split labels {bad}")

    def __len__(self) -> int:
        return len(self.paths)

    def split(self, name: str) -> "Dataset":
        keep = [i for i, s in enumerate(self.splits) if s == name]
        return self.subset(keep)

    def subset(self, indices: Sequence[int]) -> "Dataset":
        return Dataset(
            paths=[self.paths[i] for i in indices],
            splits=[self.splits[i] for i in indices],
            params=self.params, T=self.T, seed=self.seed, emission=self.emission,
            path_ids=[self.path_ids[i] for i in indices],
        )

    def states(self) -> np.ndarray:
        return np.stack([p.states for p in self.paths]) if self.paths else np.empty((0, self.T))

    def observations(self) -> np.ndarray:
        return np.stack([p.observations for p in self.paths]) if self.paths else np.empty((0, self.T))

    def counts(self) -> dict[str, int]:
        return {s: self.splits.count(s) for s in SPLITS}

    def meta(self) -> dict:
        return {**self.params.to_dict(), "T": self.T, "K": len(self.paths), "seed": self.seed,
                "emission": self.emission}

    def save(self, csv_path: str | Path) -> Path:
        """Write ``<name>.csv`` plus a ``<name>.json`` sidecar holding params and seed."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path_id", "split", "t", "state", "observation"])
            for pid, split, path in zip(self.path_ids, self.splits, self.paths):
                for t in range(path.T):
                    w.writerow([pid, split, t, f"{path.states[t]:.17g}", f"{path.observations[t]:.17g}"])
        meta = self.meta()
        meta["path_seeds"] = {str(pid): p.seed for pid, p in zip(self.path_ids, self.paths)}
        csv_path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        return csv_path

    @classmethod
    def load(cls, csv_path: str | Path) -> "Dataset":
        csv_path = Path(csv_path)
        meta = json.loads(csv_path.with_suffix(".json").read_text())
        rows: dict[int, tuple[str, list[float], list[float]]] = {}
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                pid = int(row["path_id"])
                entry = rows.setdefault(pid, (row["split"], [], []))
                entry[1].append(float(row["state"]))
                entry[2].append(float(row["observation"]))
        seeds = meta.get("path_seeds", {})
        pids = sorted(rows)
        paths = [VolPath(np.array(rows[p][1]), np.array(rows[p][2]), int(seeds.get(str(p), -1))) for p in pids]
        return cls(paths=paths, splits=[rows[p][0] for p in pids],
                   params=SvParams(meta["mu"], meta["phi"], meta["tau"]),
                   T=int(meta["T"]), seed=int(meta["seed"]), emission=meta.get("emission", "linear"),
                   path_ids=pids)


def generate_dataset(params: SvParams, K: int, T: int, seed: int,
                     split_sizes: tuple[int, int, int] = (2000, 500, 500),
                     emission: str = "linear") -> Dataset:
    """Generate ``K`` paths; path ``i`` uses the child seed ``(seed, i)``.

    The first ``split_sizes[0]`` paths are labelled train, the next test, the rest eval.
    """
    if sum(split_sizes) != K or any(s < 0 for s in split_sizes):
        raise ValueError(f"split sizes {split_sizes} must be non-negative and sum to K={K}")
    labels = [name for name, n in zip(SPLITS, split_sizes) for _ in range(n)]
    paths = [simulate_path(params, T, derive_seed(seed, i), emission) for i in range(K)]
    return Dataset(paths=paths, splits=labels, params=params, T=T, seed=int(seed), emission=emission)


def nearest_rank(sorted_values: np.ndarray, pct: float) -> float:
    """Nearest-rank percentile (rank ``ceil(pct/100 * n)``, at least 1)."""
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return float(sorted_values[min(rank, n) - 1])


def build_outlier_subset(pool: Dataset, low_pct: float = 3.0, high_pct: float = 97.0) -> Dataset:
    """Paths whose minimum is at/below the ``low_pct`` percentile of all minima,
    or whose maximum is at/above the ``high_pct`` percentile of all maxima."""
    if len(pool) == 0:
        raise ValueError("empty pool")
    if not 0 <= low_pct < high_pct <= 100:
        raise ValueError("need 0 <= low_pct < high_pct <= 100")
    states = pool.states()
    mins, maxs = states.min(axis=1), states.max(axis=1)
    lo = nearest_rank(np.sort(mins), low_pct)
    hi = nearest_rank(np.sort(maxs), high_pct)
    keep = np.flatnonzero((mins <= lo) | (maxs >= hi))
    return pool.subset(keep.tolist())
