#!/usr/bin/env python3
"""Capacity and efficiency sweep over the default (rank, load, seed) grid.

Trains every cell, then writes the per-cell recall grid and the derived
tokens-per-parameter efficiency curve as plot-ready CSV.

Usage:
  python scripts/run_capacity_sweep.py --outdir runs/capacity
  python scripts/run_capacity_sweep.py --ranks 2,4,8 --loads 16,150,448
"""

import argparse
import json
import sys
from pathlib import Path

from loramem import __version__, analysis
from loramem.memlab import TrainConfig


def main() -> int:
    parser = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--ranks", default=None, help="comma ints")
    parser.add_argument("--loads", default=None, help="comma token budgets")
    parser.add_argument("--seeds", default=None, help="comma ints")
    parser.add_argument("--tau", type=float, default=analysis.DEFAULT_TAU)
    parser.add_argument("--steps", type=int, default=1500)
    parser.add_argument("--learning-rate", type=float, default=0.5)
    parser.add_argument("--base-seed", type=int, default=0)
    parser.add_argument("--outdir", default="runs/capacity")
    args = parser.parse_args()

    def ints(text, default):
        return tuple(int(x) for x in text.split(",")) if text else default

    grid = analysis.SweepGrid(
        ranks=ints(args.ranks, analysis.DEFAULT_RANKS),
        loads=ints(args.loads, analysis.DEFAULT_LOADS),
        seeds=ints(args.seeds, analysis.DEFAULT_SEEDS),
        tau=args.tau,
    )
    base = TrainConfig(steps=args.steps, learning_rate=args.learning_rate,
                       seed=args.base_seed)
    outdir = Path(args.outdir)
    outdir.mkdir(parents=True, exist_ok=True)

    def progress(rank, load, seed, em):
        print(f"  rank={rank:<3d} load={load:<5d} seed={seed} em={em:.3f}",
              file=sys.stderr)

    result = analysis.run_sweep(grid, base, progress=progress)
    echo = {"grid": {"ranks": list(grid.ranks), "loads": list(grid.loads),
                     "seeds": list(grid.seeds), "tau": grid.tau},
            "base": vars(args)}
    (outdir / "results.csv").write_text(
        "\n".join(analysis.results_csv_lines(result, echo, __version__)) + "\n")
    (outdir / "efficiency.csv").write_text(
        "\n".join(analysis.efficiency_csv_lines(result, grid.tau, echo,
                                                __version__)) + "\n")

    curve = analysis.efficiency_curve(result, grid.tau)
    summary = {
        "t_max": {r: analysis.find_t_max(result, r, grid.tau)
                  for r in grid.ranks},
        "efficiency": curve,
        "peak_rank": max(curve, key=curve.get) if curve else None,
    }
    print(json.dumps(summary, indent=2, default=str))
    print(f"wrote {outdir}/results.csv and {outdir}/efficiency.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
