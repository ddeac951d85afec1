"""Metrics and the comparison experiments (main table, outliers, particle sweep)."""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from svpfrnn import __version__
from svpfrnn.bootstrap_pf import run_filter
from svpfrnn.model import SvPfRnnModel, run_batch
from svpfrnn.seeding import derive_seed
from svpfrnn.svmodel import Dataset, SvParams

log = logging.getLogger(__name__)

METRICS = ("mse", "mae", "qlike", "mda", "log_likelihood")
QLIKE_FLOOR = 1e-12


def compute_metrics(estimates, truths, tau: float, qlike: str = "paper") -> dict[str, float]:
    """Per-path MSE, MAE, QLIKE, MDA and Gaussian log-likelihood.

    ``qlike="paper"`` is ``mean(log(yhat^2) - y^2 / yhat^2)``; ``"standard"`` is
    ``mean(y^2/yhat^2 - log(y^2/yhat^2) - 1)``. ``|yhat|`` is floored at 1e-12
    before squaring. MDA counts sign matches of first differences over the T-1
    steps (both changes zero counts as a match). The log-likelihood sums the
    ``N(0, tau^2)`` log-density of the errors.
    """
    est = np.asarray(estimates, dtype=float)
    y = np.asarray(truths, dtype=float)
    if est.shape != y.shape or est.ndim != 1:
        raise ValueError("estimates and truths must be 1-d of equal length")
    if len(y) < 2:
        raise ValueError("need at least two steps for MDA")
    err = est - y
    small = np.abs(est) < QLIKE_FLOOR
    if small.any():
        log.debug("QLIKE: %d estimates floored at %g", int(small.sum()), QLIKE_FLOOR)
    est2 = np.maximum(est * est, QLIKE_FLOOR**2)
    if qlike == "paper":
        ql = np.mean(np.log(est2) - y * y / est2)
    elif qlike == "standard":
        ratio = np.maximum(y * y, QLIKE_FLOOR**2) / est2
        ql = np.mean(ratio - np.log(ratio) - 1.0)
    else:
        raise ValueError(f"unknown QLIKE convention {qlike!r}")
    mda = np.mean(np.sign(np.diff(est)) == np.sign(np.diff(y)))
    loglik = np.sum(-0.5 * math.log(2 * math.pi * tau * tau) - err * err / (2 * tau * tau))
    return {"mse": float(np.mean(err**2)), "mae": float(np.mean(np.abs(err))), "qlike": float(ql),
            "mda": float(mda), "log_likelihood": float(loglik)}


@dataclass
class MetricsReport:
    label: str
    K: int
    n_paths: int
    mean: dict[str, float]
    variance: dict[str, float]
    n_runs: int = 1
    per_path: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        return {"label": self.label, "K": self.K, "n_paths": self.n_paths, "n_runs": self.n_runs,
                "mean": self.mean, "variance": self.variance}


def aggregate(label: str, K: int, rows: list[dict[str, float]], n_paths: int) -> MetricsReport:
    """Mean and (population) variance of each metric over per-run rows, in row order."""
    if not rows:
        raise ValueError("nothing to aggregate")
    cols = {m: np.array([r[m] for r in rows]) for m in METRICS}
    return MetricsReport(label, K, n_paths, {m: float(v.mean()) for m, v in cols.items()},
                         {m: float(v.var()) for m, v in cols.items()}, len(rows) // max(n_paths, 1),
                         {m: v.tolist() for m, v in cols.items()})


class FilterModel(Protocol):
    label: str

    def estimate(self, dataset: Dataset, K: int, seed: int) -> np.ndarray:
        """Estimates of shape ``(len(dataset), T)``."""


def _pf_path(args):
    obs, K, params, seed = args
    return run_filter(obs, K, params, seed).estimates


@dataclass
class BootstrapPF:
    params: SvParams
    label: str = "Particle Filter"
    workers: int = 1

    def estimate(self, dataset: Dataset, K: int, seed: int) -> np.ndarray:
        jobs = [(p.observations, K, self.params, derive_seed(seed, pid))
                for pid, p in zip(dataset.path_ids, dataset.paths)]
        if self.workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(self.workers) as pool:
                return np.stack(list(pool.map(_pf_path, jobs, chunksize=max(1, len(jobs) // (4 * self.workers)))))
        return np.stack([_pf_path(j) for j in jobs])


@dataclass
class NeuralPF:
    model: SvPfRnnModel
    label: str = "SV-PF-RNN"
    batch: int = 100

    def estimate(self, dataset: Dataset, K: int, seed: int) -> np.ndarray:
        model = replace(self.model, K=K)
        X = dataset.observations()
        out = [run_batch(model, X[s:s + self.batch], derive_seed(seed, b))[0]
               for b, s in enumerate(range(0, len(X), self.batch))]
        return np.concatenate(out) if out else np.empty((0, dataset.T))


@dataclass
class OracleModel:
    """Returns the true states; a harness sanity check."""
    label: str = "Oracle"

    def estimate(self, dataset: Dataset, K: int, seed: int) -> np.ndarray:
        return dataset.states()


def evaluate_model(model: FilterModel, dataset: Dataset, K: int, seeds: Sequence[int], tau: float,
                   qlike: str = "paper") -> MetricsReport:
    """Run ``model`` once per seed; every (seed, path) pair contributes one row."""
    truths = dataset.states()
    rows = []
    for seed in seeds:
        est = model.estimate(dataset, K, seed)
        rows.extend(compute_metrics(e, y, tau, qlike) for e, y in zip(est, truths))
    return aggregate(model.label, K, rows, len(dataset))


def run_main_experiment(models: Sequence[FilterModel], eval_set: Dataset, K: int, seeds: Sequence[int],
                        qlike: str = "paper") -> list[MetricsReport]:
    return [evaluate_model(m, eval_set, K, seeds, eval_set.params.tau, qlike) for m in models]


def run_particle_sweep(models: Sequence[FilterModel], eval_set: Dataset, K_list: Sequence[int],
                       seeds: Sequence[int]) -> list[MetricsReport]:
    if not K_list:
        raise ValueError("K_list must be non-empty")
    return [evaluate_model(m, eval_set, K, seeds, eval_set.params.tau) for K in K_list for m in models]


def run_outlier_experiment(models: Sequence[FilterModel], outlier_set: Dataset, K: int,
                           seeds: Sequence[int]) -> list[MetricsReport]:
    if len(outlier_set) == 0:
        log.warning("outlier set is empty")
        return []
    return [evaluate_model(m, outlier_set, K, seeds, outlier_set.params.tau) for m in models]


def _fmt(v: float) -> str:
    return f"{v:.17g}"


_ROW_NAMES = {"mse": "MSE", "mae": "MAE", "qlike": "QLIKE", "mda": "MDA", "log_likelihood": "Log Likelihood"}


def write_metric_table(path: str | Path, reports: Sequence[MetricsReport], metrics: Sequence[str] = METRICS) -> None:
    """Rows are metrics, columns are models (mean, then variance)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["metric"]
        for r in reports:
            header += [r.label, f"{r.label} (variance)"]
        w.writerow(header)
        for m in metrics:
            row = [_ROW_NAMES[m]]
            for r in reports:
                row += [_fmt(r.mean[m]), _fmt(r.variance[m])]
            w.writerow(row)


def write_sweep(out_dir: str | Path, reports: Sequence[MetricsReport]) -> None:
    """``table3.csv`` plus per-metric curve files ``sweep_mse.csv`` / ``sweep_mae.csv``."""
    out = Path(out_dir)
    labels = list(dict.fromkeys(r.label for r in reports))
    Ks = sorted({r.K for r in reports})
    by = {(r.label, r.K): r for r in reports}
    with open(out / "table3.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = ["particles"]
        for lab in labels:
            header += [f"{lab} MSE", f"{lab} MSE variance", f"{lab} MAE", f"{lab} MAE variance"]
        w.writerow(header)
        for K in Ks:
            row = [K]
            for lab in labels:
                r = by[(lab, K)]
                row += [_fmt(r.mean["mse"]), _fmt(r.variance["mse"]), _fmt(r.mean["mae"]), _fmt(r.variance["mae"])]
            w.writerow(row)
    for metric in ("mse", "mae"):
        with open(out / f"sweep_{metric}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["particles"] + labels)
            for K in Ks:
                w.writerow([K] + [_fmt(by[(lab, K)].mean[metric]) for lab in labels])
    script = ["set datafile separator ','", "set key autotitle columnhead", "set xlabel 'particles'"]
    for metric in ("mse", "mae"):
        plots = ", ".join(f"'sweep_{metric}.csv' using 1:{i + 2} with linespoints" for i in range(len(labels)))
        script += [f"set ylabel '{metric.upper()}'", f"set output 'sweep_{metric}.png'",
                   "set terminal pngcairo", f"plot {plots}"]
    (out / "sweep.gp").write_text("\n".join(script) + "\n")


def write_meta(path: str | Path, **fields) -> None:
    meta = {"code_version": __version__, **fields}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n")
