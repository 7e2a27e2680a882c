"""Measured SCL failure against the union bound over a frozen-size sweep.

Reproduces the shape of the bound-versus-measurement figure at desk scale:
for each disclosure size q the ``q`` worst channels are frozen, ``t`` key
pairs are decoded and the failure fraction is printed next to min(1, bound).

    python scripts/failure_sweep.py --m 13 --e-mu 0.02 --start 1500 --stop 2300 --step 40
"""

import argparse

import numpy as np

from airqkd.harness import PlanLibrary
from airqkd.plan import measure_failure_prob


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, default=13)
    ap.add_argument("--e-mu", type=float, default=0.02)
    ap.add_argument("--start", type=int, required=True)
    ap.add_argument("--stop", type=int, required=True)
    ap.add_argument("--step", type=int, default=40)
    ap.add_argument("--t", type=int, default=10_000)
    ap.add_argument("--list-size", type=int, default=16)
    ap.add_argument("--max-failures", type=int, default=100,
                    help="stop a point early after this many failures (0: never)")
    ap.add_argument("--seed", type=int, default=30)
    ap.add_argument("--plan-dir", default=None)
    args = ap.parse_args(argv)

    n = 1 << args.m
    prof = PlanLibrary(args.plan_dir).profile(n, args.e_mu)
    tail = np.concatenate([np.cumsum(prof.sorted_p_e[::-1])[::-1], [0.0]])
    print("q,bound,measured")
    for q in range(args.start, args.stop + 1, args.step):
        p = measure_failure_prob(n, args.e_mu, prof.w, q, args.t, root_seed=args.seed,
                                 list_size=args.list_size, max_failures=args.max_failures or None)
        print(f"{q},{min(1.0, tail[q]):.4g},{p:.4g}", flush=True)


if __name__ == "__main__":
    main()
