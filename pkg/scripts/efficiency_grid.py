"""Measured efficiency and rounds over an (n, E_mu) grid of plans.

Thin wrapper over the library: loads or builds each plan, runs sessions and
prints one row per cell with the closed-form predictions alongside.

    python scripts/efficiency_grid.py --m 14 16 --e-mu 0.02 0.06 --eps-target 1e-4 --trials 10000
"""

import argparse
import sys

from airqkd.harness import ExperimentSpec, format_cells, run_experiment


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, nargs="+", default=[14, 16])
    ap.add_argument("--e-mu", type=float, nargs="+", default=[0.02, 0.06])
    ap.add_argument("--r-max", type=int, default=4)
    ap.add_argument("--eps-target", type=float, default=1e-4)
    ap.add_argument("--t", type=int, default=10_000)
    ap.add_argument("--trials", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--format", default="text", choices=["text", "csv"])
    ap.add_argument("--plan-dir", default=None)
    args = ap.parse_args(argv)

    spec = ExperimentSpec(n=[1 << m for m in args.m], e_mu=args.e_mu, r_max=args.r_max,
                          eps_target=args.eps_target, t=args.t, trials=args.trials, root_seed=args.seed,
                          fmt=args.format, plan_dir=args.plan_dir)
    cells = run_experiment(spec, log=lambda s: print(s, file=sys.stderr, flush=True))
    print(format_cells(cells, args.format), end="")


if __name__ == "__main__":
    main()
