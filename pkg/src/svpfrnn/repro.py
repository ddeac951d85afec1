"""Full reproduction pipeline: data, pretraining, both training runs, and the three result tables."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from svpfrnn.eval_harness import (BootstrapPF, NeuralPF, run_main_experiment, run_outlier_experiment,
                                  run_particle_sweep, write_meta, write_metric_table, write_sweep)
from svpfrnn.pretrain import PretrainConfig, pretrain_model
from svpfrnn.seeding import derive_seed
from svpfrnn.svmodel import PAPER_PARAMS, SvParams, build_outlier_subset, generate_dataset
from svpfrnn.train import TrainConfig, fit

log = logging.getLogger(__name__)

LABELS = {
    "pf": "Particle Filter",
    "pretrained": "SV-PF-RNN (pretraining only)",
    "mse": "SV-PF-RNN (standard loss function)",
    "inverse_density": "SV-PF-RNN (modified loss function)",
}


@dataclass
class ReproConfig:
    params: SvParams = PAPER_PARAMS
    seed: int = 7
    n_paths: int = 3000
    T: int = 300
    splits: tuple[int, int, int] = (2000, 500, 500)
    emission: str = "linear"
    particles: int = 128
    runs: int = 1  # filter seeds per eval path
    table1_paths: int | None = None  # None: the whole eval split
    sweep_paths: int = 250
    sweep_particles: tuple[int, ...] = (16, 32, 64, 96, 128, 160)
    low_pct: float = 3.0
    high_pct: float = 97.0
    workers: int = 1
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def quick(cls) -> "ReproConfig":
        """A few-minute smoke version of every stage."""
        return cls(n_paths=60, T=60, splits=(40, 10, 10), particles=32, sweep_paths=10,
                   sweep_particles=(16, 32), pretrain=PretrainConfig(n_pairs=4000, epochs=20),
                   train=TrainConfig(epochs=1, batch_size=20, particles=16, test_paths=10))


def reproduce(rc: ReproConfig, out_dir: str | Path) -> dict:
    """Run every stage into ``out_dir``; returns the per-table reports keyed by table name.

    Every random stream is derived from ``rc.seed``, so a rerun writes the same bytes
    (wall-clock timings are kept out of the CSVs).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ds = generate_dataset(rc.params, rc.n_paths, rc.T, derive_seed(rc.seed, 0), rc.splits, rc.emission)
    ds.save(out / "dataset.csv")

    pretrained, report = pretrain_model(rc.params, replace(rc.pretrain, seed=derive_seed(rc.seed, 1)),
                                        K=rc.particles)
    pretrained.save(out / "pretrained_model.json")
    (out / "pretrain_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")

    models = [BootstrapPF(rc.params, LABELS["pf"], rc.workers), NeuralPF(pretrained, LABELS["pretrained"])]
    for i, kind in enumerate(("mse", "inverse_density"), start=2):
        cfg = replace(rc.train, loss_kind=kind, seed=derive_seed(rc.seed, i))
        trained, stats = fit(pretrained, ds, cfg)
        trained.save(out / f"trained_{kind}.json")
        stats.to_csv(out / f"train_stats_{kind}.csv", timings=False)
        if any(e.collapsed for e in stats.entries):
            log.warning("%s training: particle clouds collapsed", kind)
        models.append(NeuralPF(trained, LABELS[kind]))

    eval_set = ds.split("eval")
    if rc.table1_paths is not None:
        eval_set = eval_set.subset(range(min(rc.table1_paths, len(eval_set))))
    seeds = [derive_seed(rc.seed, 1000 + r) for r in range(rc.runs)]
    table1 = run_main_experiment(models, eval_set, rc.particles, seeds)
    write_metric_table(out / "table1.csv", table1)

    outliers = build_outlier_subset(ds.split("eval"), rc.low_pct, rc.high_pct)
    table2 = run_outlier_experiment(models, outliers, rc.particles, seeds)
    if table2:
        write_metric_table(out / "table2.csv", table2, ("mse", "mae"))

    sweep_set = ds.split("eval").subset(range(min(rc.sweep_paths, len(ds.split("eval")))))
    table3 = run_particle_sweep([models[0], models[-1]], sweep_set, list(rc.sweep_particles), seeds)
    write_sweep(out, table3)

    cfg = asdict(rc)
    cfg["params"] = rc.params.to_dict()
    write_meta(out / "meta.json", config=cfg, seeds=seeds, n_eval=len(eval_set),
               outlier_path_ids=outliers.path_ids, sweep_paths=len(sweep_set))
    return {"table1": table1, "table2": table2, "table3": table3}
