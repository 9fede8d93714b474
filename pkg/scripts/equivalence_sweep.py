"""Randomised agreement sweep of the three IC verifiers; writes one CSV row per case."""

import argparse
import csv
import time
import warnings

from exante_ic.characterize import characterize_matrices
from exante_ic.core import payoff_matrices
from exante_ic.errors import InfeasibleError
from exante_ic.oracle import verify_ic
from exante_ic.random_scenarios import random_case
from exante_ic.surrogate import full_theorem3_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--count", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="equivalence_sweep.csv")
    args = ap.parse_args()

    t0 = time.perf_counter()
    disagreements = 0
    with open(args.out, "w", newline="") as fh, warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w = csv.writer(fh)
        w.writerow(["seed", "family", "model", "grid", "oracle", "characterize", "surrogate"])
        for k in range(args.count):
            case = random_case(args.seed + k, dim=1 + k % 2)
            M = payoff_matrices(case.rules, case.model, case.space)
            try:
                o = verify_ic(case.rules, case.model, case.space, matrices=M).ic
            except InfeasibleError:
                o = False
            c = characterize_matrices(*M, case.space.weights, case.model.C).valid
            t = full_theorem3_check(case.rules, case.model, case.space, matrices=M).ic_candidate
            disagreements += not (o == c == t)
            w.writerow([case.seed, case.family, case.model_kind, "x".join(map(str, case.space.shape)), o, c, t])
    print(f"{args.count} cases, {disagreements} disagreements, {time.perf_counter() - t0:.1f}s -> {args.out}")


if __name__ == "__main__":
    main()
