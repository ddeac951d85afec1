"""Command-line entry point: ``svpfrnn <command> [options]``.

Every command accepts ``--config FILE.json``; explicit flags override file values.
Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from svpfrnn.svmodel import PAPER_PARAMS, Dataset, SvParams, build_outlier_subset, generate_dataset

log = logging.getLogger("svpfrnn")

STOCHASTIC = {"gen-data", "pf-run", "pretrain", "train", "eval", "sweep", "outliers", "repro-paper"}


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _add_common(p: argparse.ArgumentParser, params: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file with option values (flags win)")
    p.add_argument("--seed", type=int, help="root seed (required)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--threads", type=int, help="worker processes for per-path filtering")
    p.add_argument("-v", "--verbose", action="store_true")
    if params:
        p.add_argument("--mu", type=float)
        p.add_argument("--phi", type=float)
        p.add_argument("--tau", type=float)


def _add_data_flags(p):
    p.add_argument("--K", type=int, help="number of paths")
    p.add_argument("--T", type=int, help="path length")
    p.add_argument("--splits", type=int, nargs=3, metavar=("TRAIN", "TEST", "EVAL"))
    p.add_argument("--emission", choices=("linear", "squared"))


def _add_model_flags(p):
    p.add_argument("--model", type=Path, help="model JSON bundle")
    p.add_argument("--particles", type=int, help="particle count")
    p.add_argument("--alpha", type=float, help="soft-resampling mixture weight")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="svpfrnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="simulate a Taylor SV dataset")
    _add_common(p)
    _add_data_flags(p)

    p = sub.add_parser("pf-run", help="bootstrap particle filter on one dataset path")
    _add_common(p)
    p.add_argument("--data", type=Path, help="dataset CSV")
    p.add_argument("--path-id", type=int, default=None)
    p.add_argument("--particles", type=int)
    p.add_argument("--record", action="store_true", help="also write particles_t.csv")

    p = sub.add_parser("pretrain", help="fit both nets to the analytic filter functions")
    _add_common(p)
    p.add_argument("--pairs", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--particles", type=int)
    p.add_argument("--dump-grids", action="store_true", help="write grid CSVs for surface plots")

    p = sub.add_parser("train", help="train a pretrained model end to end")
    _add_common(p)
    _add_model_flags(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--loss", choices=("mse", "inverse_density"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--tbptt-window", type=int)
    p.add_argument("--density-floor", type=float)
    p.add_argument("--density-scale", choices=("std", "variance"))
    p.add_argument("--density-form", choices=("cloud", "particle"))
    p.add_argument("--train-particles", type=int)

    for name, help_ in (("eval", "metrics table for the PF and given models"),
                        ("outliers", "metrics on the outlier subset"),
                        ("sweep", "metrics over particle counts")):
        p = sub.add_parser(name, help=help_)
        _add_common(p)
        p.add_argument("--data", type=Path)
        p.add_argument("--models", type=Path, nargs="*", default=None, help="model bundles (label = file stem)")
        p.add_argument("--particles", type=int)
        p.add_argument("--runs", type=int, help="filter seeds per path")
        p.add_argument("--limit", type=int, help="use only the first N paths")
        p.add_argument("--qlike-convention", choices=("paper", "standard"))
        if name == "outliers":
            p.add_argument("--low-pct", type=float)
            p.add_argument("--high-pct", type=float)
        if name == "sweep":
            p.add_argument("--particle-list", type=int, nargs="+")

    p = sub.add_parser("repro-paper", help="full pipeline: data, pretrain, train, tables 1-3")
    _add_common(p)
    p.add_argument("--scale", choices=("full", "quick"), help="'quick' shrinks every stage for smoke runs")
    return parser


DEFAULTS = {
    "mu": PAPER_PARAMS.mu, "phi": PAPER_PARAMS.phi, "tau": PAPER_PARAMS.tau,
    "K": 3000, "T": 300, "splits": [2000, 500, 500], "emission": "linear",
    "particles": 128, "alpha": 0.5, "runs": 1, "low_pct": 3.0, "high_pct": 97.0,
    "particle_list": [16, 32, 64, 96, 128, 160], "qlike_convention": "paper", "scale": "full",
    "threads": os.cpu_count() or 1,
}


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if args.config is not None:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        cfg.update({k.replace("-", "_"): v for k, v in file_cfg.items()})
    for key, val in vars(args).items():
        if val is not None and key != "config":
            cfg[key] = val
    if args.command in STOCHASTIC and cfg.get("seed") is None:
        raise ConfigError(f"--seed is required for {args.command}")
    try:
        cfg["params"] = SvParams(float(cfg["mu"]), float(cfg["phi"]), float(cfg["tau"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg["out"] = Path(cfg.get("out") or "results")
    return cfg


def _record_config(out: Path, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    from svpfrnn import __version__
    clean = {k: (v.to_dict() if isinstance(v, SvParams) else v) for k, v in cfg.items()}
    clean["code_version"] = __version__
    (out / "config.json").write_text(json.dumps(clean, indent=2, sort_keys=True, default=str) + "\n")


def _load_data(cfg: dict) -> Dataset:
    if cfg.get("data") is None:
        raise ConfigError("--data is required")
    return Dataset.load(cfg["data"])


def cmd_gen_data(cfg: dict) -> None:
    ds = generate_dataset(cfg["params"], int(cfg["K"]), int(cfg["T"]), int(cfg["seed"]),
                          tuple(cfg["splits"]), cfg["emission"])
    ds.save(cfg["out"] / "dataset.csv")
    log.info("wrote %d paths to %s", len(ds), cfg["out"] / "dataset.csv")


def cmd_pf_run(cfg: dict) -> None:
    from svpfrnn.bootstrap_pf import run_filter
    from svpfrnn.seeding import derive_seed
    ds = _load_data(cfg)
    i = 0 if cfg.get("path_id") is None else ds.path_ids.index(cfg["path_id"])
    path = ds.paths[i]
    out = run_filter(path, int(cfg["particles"]), ds.params, derive_seed(cfg["seed"], ds.path_ids[i]),
                     record=bool(cfg.get("record")))
    out.to_csv(cfg["out"] / "filter.csv", path.states)
    if cfg.get("record"):
        out.particles_to_csv(cfg["out"] / "particles_t.csv")
    if out.degenerate_steps:
        log.warning("weights underflowed at %d steps", len(out.degenerate_steps))


def _pretrain_config(cfg: dict):
    from svpfrnn.pretrain import PretrainConfig
    pc = PretrainConfig(seed=int(cfg["seed"]))
    for flag, attr in (("pairs", "n_pairs"), ("epochs", "epochs"), ("batch", "batch"), ("lr", "lr")):
        if cfg.get(flag) is not None:
            setattr(pc, attr, cfg[flag])
    return pc


def cmd_pretrain(cfg: dict) -> None:
    from svpfrnn.bootstrap_pf import pf_obs_likelihood
    from svpfrnn.pretrain import dump_grid, pretrain_model, transition_target
    model, report = pretrain_model(cfg["params"], _pretrain_config(cfg), float(cfg["alpha"]), int(cfg["particles"]))
    out = cfg["out"]
    model.save(out / "pretrained_model.json")
    (out / "pretrain_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    if cfg.get("dump_grids"):
        tg, og = report.transition_grid, report.observation_grid
        dump_grid(out / "grid_transition.csv", model.trans_net,
                  lambda z: transition_target(cfg["params"], z[:, 0], z[:, 1]), tg.p_range, tg.other_range)
        dump_grid(out / "grid_observation.csv", model.obs_net,
                  lambda z: pf_obs_likelihood(z[:, 0], z[:, 1]), og.p_range, og.other_range)


def _train_config(cfg: dict):
    from svpfrnn.train import TrainConfig
    tc = TrainConfig(seed=int(cfg["seed"]))
    for flag, attr in (("loss", "loss_kind"), ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
                       ("tbptt_window", "tbptt_window"), ("density_floor", "density_floor"),
                       ("density_scale", "density_scale"), ("density_form", "density_form"),
                       ("train_particles", "particles")):
        if cfg.get(flag) is not None:
            setattr(tc, attr, cfg[flag])
    tc.__post_init__()
    return tc


def cmd_train(cfg: dict) -> None:
    from svpfrnn.model import SvPfRnnModel
    from svpfrnn.train import fit
    if cfg.get("model") is None:
        raise ConfigError("--model (a pretrained bundle) is required")
    model = SvPfRnnModel.load(cfg["model"])
    fit(model, _load_data(cfg), _train_config(cfg), cfg["out"])


def _eval_models(cfg: dict, params: SvParams) -> list:
    from svpfrnn.eval_harness import BootstrapPF, NeuralPF
    from svpfrnn.model import SvPfRnnModel
    models = [BootstrapPF(params, workers=int(cfg["threads"]))]
    for path in cfg.get("models") or []:
        models.append(NeuralPF(SvPfRnnModel.load(path), label=Path(path).stem))
    return models


def _eval_set(cfg: dict) -> Dataset:
    ds = _load_data(cfg)
    ev = ds.split("eval") if ds.counts()["eval"] else ds
    if cfg.get("limit"):
        ev = ev.subset(range(min(int(cfg["limit"]), len(ev))))
    return ev


def _seeds(cfg: dict) -> list[int]:
    from svpfrnn.seeding import derive_seed
    return [derive_seed(int(cfg["seed"]), 1000 + r) for r in range(int(cfg["runs"]))]


def cmd_eval(cfg: dict) -> None:
    from svpfrnn.eval_harness import run_main_experiment, write_meta, write_metric_table
    ev = _eval_set(cfg)
    reports = run_main_experiment(_eval_models(cfg, ev.params), ev, int(cfg["particles"]), _seeds(cfg),
                                  cfg["qlike_convention"])
    write_metric_table(cfg["out"] / "table1.csv", reports)
    write_meta(cfg["out"] / "meta.json", seeds=_seeds(cfg), K=cfg["particles"], params=ev.params.to_dict(),
               n_paths=len(ev))


def cmd_outliers(cfg: dict) -> None:
    from svpfrnn.eval_harness import run_outlier_experiment, write_meta, write_metric_table
    ds = _load_data(cfg)
    pool = ds.split("eval") if ds.counts()["eval"] else ds
    subset = build_outlier_subset(pool, float(cfg["low_pct"]), float(cfg["high_pct"]))
    reports = run_outlier_experiment(_eval_models(cfg, ds.params), subset, int(cfg["particles"]), _seeds(cfg))
    write_metric_table(cfg["out"] / "table2.csv", reports, ("mse", "mae"))
    write_meta(cfg["out"] / "meta.json", seeds=_seeds(cfg), K=cfg["particles"], params=ds.params.to_dict(),
               n_paths=len(subset), outlier_path_ids=subset.path_ids)


def cmd_sweep(cfg: dict) -> None:
    from svpfrnn.eval_harness import run_particle_sweep, write_meta, write_sweep
    ev = _eval_set(cfg)
    reports = run_particle_sweep(_eval_models(cfg, ev.params), ev, list(cfg["particle_list"]), _seeds(cfg))
    write_sweep(cfg["out"], reports)
    write_meta(cfg["out"] / "meta.json", seeds=_seeds(cfg), K=cfg["particle_list"], params=ev.params.to_dict(),
               n_paths=len(ev))


def cmd_repro(cfg: dict) -> None:
    from svpfrnn.repro import ReproConfig, reproduce
    rc = ReproConfig.quick() if cfg["scale"] == "quick" else ReproConfig()
    rc.params = cfg["params"]
    rc.seed = int(cfg["seed"])
    rc.workers = int(cfg["threads"])
    if cfg.get("emission"):
        rc.emission = cfg["emission"]
    reproduce(rc, cfg["out"])


COMMANDS = {"gen-data": cmd_gen_data, "pf-run": cmd_pf_run, "pretrain": cmd_pretrain, "train": cmd_train,
            "eval": cmd_eval, "outliers": cmd_outliers, "sweep": cmd_sweep, "repro-paper": cmd_repro}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"svpfrnn: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if cfg.get("verbose") else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _record_config(cfg["out"], cfg)
        COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"svpfrnn: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.error("%s failed: %s", args.command, exc, exc_info=cfg.get("verbose"))
        return 1
    return 0


def dispatch(argv: list[str]) -> int:
    return main(argv)


if __name__ == "__main__":
    sys.exit(main())
