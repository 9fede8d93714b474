"""Multiplier controller against truthful and uniform bid scaling on the tight-budget menu."""

import argparse

import numpy as np

from exante_ic.builder import solve_multiplier
from exante_ic.scenario import load_scenario
from exante_ic.simulator import EpisodeConfig, compare_controllers, linear_multiplier, truthful, uniform_scale


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--scenario", default="tight_budget_menu")
    ap.add_argument("--rounds", type=int, default=1_000_000)
    ap.add_argument("--seed", type=int, default=20240611)
    args = ap.parse_args()

    sc = load_scenario(args.scenario)
    mech = solve_multiplier(sc.menu.outcomes, sc.menu.prices, sc.model, sc.space)
    controllers = [linear_multiplier(mech.r), truthful()] + [uniform_scale(k) for k in np.linspace(0.1, 2.0, 20)]
    table = compare_controllers([EpisodeConfig(args.rounds, args.seed, c, mech) for c in controllers],
                                sc.model, sc.space)
    print(f"r* = {mech.r:.6g}, C = {sc.model.C:g}, i.i.d. type draws, {args.rounds} rounds")
    print(f"{'controller':42s} {'utility':>10s} {'se':>8s} {'constraint':>11s} {'se':>8s}  feasible")
    for row in table.rows:
        print(f"{row.controller:42s} {row.realized_utility:10.6f} {row.utility_se:8.2g} "
              f"{row.realized_constraint:11.6f} {row.constraint_se:8.2g}  {row.feasible}")


if __name__ == "__main__":
    main()
