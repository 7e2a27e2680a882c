"""Closed-form efficiency of analytic plans for long codes.

Builds (or loads from the plan library) a population profile for each block
length, runs the candidate sweep with the union bound as the failure
estimate, picks the cuts and evaluates the round model.

    python scripts/analytic_headline.py --m 16 20 24 27 30 --e-mu 0.02
"""

import argparse
import sys

from airqkd.analytics import report
from airqkd.construction import PopulationProfile
from airqkd.harness import PlanLibrary
from airqkd.plan import build_analytic_plan


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--m", type=int, nargs="+", default=[16, 20, 24, 27, 30])
    ap.add_argument("--e-mu", type=float, nargs="+", default=[0.02])
    ap.add_argument("--r-max", type=int, default=4)
    ap.add_argument("--eps-target", type=float, default=1e-8)
    ap.add_argument("--fidelity", type=int, default=32)
    ap.add_argument("--exact-up-to", type=int, default=16,
                    help="use the per-channel profile for m up to this value")
    ap.add_argument("--plan-dir", default=None)
    args = ap.parse_args(argv)

    lib = PlanLibrary(args.plan_dir)
    log = lambda s: print(s, file=sys.stderr, flush=True)  # noqa: E731
    print("m,e_mu,profile,cuts,eps,efficiency,avg_rounds,eps_overall")
    for e in args.e_mu:
        for m in args.m:
            n = 1 << m
            if m <= args.exact_up_to:
                pop = PopulationProfile.from_profile(lib.profile(n, e))
                kind = "exact"
            else:
                pop = lib.population(n, e, args.fidelity, log=log)
                kind = f"population/{args.fidelity}"
            plan = build_analytic_plan(pop, args.r_max, args.eps_target)
            r = report(plan.round_model())
            cuts = " ".join(str(q) for q in plan.cuts)
            eps = " ".join(f"{x:.3g}" for x in plan.eps)
            print(f"{m},{e},{kind},{cuts},{eps},{r.efficiency:.4f},{r.avg_rounds:.3f},{r.eps_overall:.3g}",
                  flush=True)


if __name__ == "__main__":
    main()
