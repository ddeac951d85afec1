"""Bootstrap particle filter baseline on freshly simulated paper-parameter paths.

Usage: python scripts/pf_baseline.py --paths 500 --particles 128 --seed 7
"""

import argparse
import time

from svpfrnn.eval_harness import BootstrapPF, evaluate_model
from svpfrnn.seeding import derive_seed
from svpfrnn.svmodel import PAPER_PARAMS, generate_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=500)
    ap.add_argument("--T", type=int, default=300)
    ap.add_argument("--particles", type=int, default=128)
    ap.add_argument("--runs", type=int, default=1)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    ds = generate_dataset(PAPER_PARAMS, args.paths, args.T, args.seed, (0, 0, args.paths))
    t0 = time.perf_counter()
    seeds = [derive_seed(args.seed, 1000 + r) for r in range(args.runs)]
    rep = evaluate_model(BootstrapPF(PAPER_PARAMS, workers=args.workers), ds, args.particles, seeds,
                         PAPER_PARAMS.tau)
    print(f"{args.paths} paths, K={args.particles}, {time.perf_counter() - t0:.1f}s")
    for m, v in rep.mean.items():
        print(f"  {m:<15} {v: .5f}  (variance {rep.variance[m]:.5f})")


if __name__ == "__main__":
    main()
