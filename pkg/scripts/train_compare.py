"""Pretrain once, train with both losses, and compare held-out MSE against the pretrained model.

A desk-scale version of the training experiment; every stage is seeded.

Usage: python scripts/train_compare.py --epochs 1 --train-particles 32 --out runs/compare
"""

import argparse
import json
from pathlib import Path

from svpfrnn.pretrain import PretrainConfig, pretrain_model
from svpfrnn.svmodel import PAPER_PARAMS, generate_dataset
from svpfrnn.train import TrainConfig, config_dict, evaluate_mse, fit


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--epochs", type=int, default=1)
    ap.add_argument("--train-particles", type=int, default=32)
    ap.add_argument("--eval-paths", type=int, default=200)
    ap.add_argument("--out", type=Path, default=Path("runs/compare"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    ds = generate_dataset(PAPER_PARAMS, 3000, 300, args.seed)
    held = ds.split("eval").subset(range(args.eval_paths))
    model, report = pretrain_model(PAPER_PARAMS, PretrainConfig(seed=args.seed))
    model.save(args.out / "pretrained_model.json")
    results = {"pretrained": evaluate_mse(model, held, args.seed)}
    print(f"pretrained            held-out MSE {results['pretrained']:.4f}")

    for kind in ("mse", "inverse_density"):
        cfg = TrainConfig(loss_kind=kind, epochs=args.epochs, particles=args.train_particles, seed=args.seed)
        trained, stats = fit(model, ds, cfg, args.out / kind)
        results[kind] = evaluate_mse(trained, held, args.seed)
        spread = stats.entries[-1].particle_spread
        print(f"{kind:<21} held-out MSE {results[kind]:.4f}  (final cloud spread {spread:.3f})")
        results[f"{kind}_config"] = config_dict(cfg)

    results["pretrain_report"] = report.to_dict()
    (args.out / "summary.json").write_text(json.dumps(results, indent=2) + "\n")


if __name__ == "__main__":
    main()
