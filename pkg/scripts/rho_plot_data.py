"""rho+(r) and rho-(r) over the breakpoint sweep of a scenario, as CSV plot data."""

import argparse

from exante_ic.builder import induce_rules, solve_multiplier
from exante_ic.characterize import critical_multiplier, rho_sweep, write_rho_csv
from exante_ic.scenario import load_scenario


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("scenario", nargs="?", default="tight_budget_menu")
    ap.add_argument("--out", default="rho.csv")
    args = ap.parse_args()

    sc = load_scenario(args.scenario)
    rules = sc.rules
    if rules is None:
        mech = solve_multiplier(sc.menu.outcomes, sc.menu.prices, sc.model, sc.space)
        rules = induce_rules(mech, sc.model, sc.space)
    rs, rp, rm = rho_sweep(rules, sc.model, sc.space)
    write_rho_csv(args.out, rs, rp, rm)
    r0 = critical_multiplier(rules, sc.model, sc.space)
    print(f"{len(rs)} sweep points, r0 = {r0:.6g} -> {args.out}")


if __name__ == "__main__":
    main()
