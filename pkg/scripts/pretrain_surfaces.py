"""Pretrain both nets and write network-vs-analytic grids for surface plots.

Writes grid_transition.csv, grid_observation.csv and a gnuplot script into --out.

Usage: python scripts/pretrain_surfaces.py --out runs/surfaces
"""

import argparse
import json
from pathlib import Path

from svpfrnn.bootstrap_pf import pf_obs_likelihood
from svpfrnn.pretrain import PretrainConfig, dump_grid, pretrain_model, transition_target
from svpfrnn.svmodel import PAPER_PARAMS

GNUPLOT = """set datafile separator ','
set terminal pngcairo size 1200,500
set xlabel 'p'
set ylabel 'second input'
set output 'surfaces.png'
set multiplot layout 1,2
splot 'grid_transition.csv' every ::1 using 1:2:($3-$4) with points pt 7 ps 0.2 title 'transition error'
splot 'grid_observation.csv' every ::1 using 1:2:($3-$4) with points pt 7 ps 0.2 title 'observation error'
unset multiplot
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--grid", type=int, default=200)
    ap.add_argument("--out", type=Path, default=Path("runs/surfaces"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)

    model, report = pretrain_model(PAPER_PARAMS, PretrainConfig(epochs=args.epochs, grid=args.grid, seed=args.seed))
    model.save(args.out / "pretrained_model.json")
    tg, og = report.transition_grid, report.observation_grid
    dump_grid(args.out / "grid_transition.csv", model.trans_net,
              lambda z: transition_target(PAPER_PARAMS, z[:, 0], z[:, 1]), tg.p_range, tg.other_range, args.grid)
    dump_grid(args.out / "grid_observation.csv", model.obs_net,
              lambda z: pf_obs_likelihood(z[:, 0], z[:, 1]), og.p_range, og.other_range, args.grid)
    (args.out / "surfaces.gp").write_text(GNUPLOT)
    (args.out / "pretrain_report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(f"transition max abs error {tg.max_abs_error:.4f}")
    print(f"observation max abs error {og.max_abs_error:.4f} ({100 * og.relative:.1f}% of peak {og.peak:.3f})")


if __name__ == "__main__":
    main()
