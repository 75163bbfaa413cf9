"""Run the two-agent example under all three dynamics and print a summary.

Writes one trace CSV per dynamic into --out (default out/).
"""

import argparse
import os

import numpy as np

from fedgame.analysis import certify_nash
from fedgame.config import build_scenario, parse_scenario
from fedgame.dynamics import run_dynamic
from fedgame.scenarios import builtin_text
from fedgame.traceio import write_trace_csv

SCENARIOS = ("example1-upbred", "example1-2p", "example1-fas")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out")
    args = ap.parse_args()
    os.makedirs(args.out, exist_ok=True)

    for name in SCENARIOS:
        built = build_scenario(parse_scenario(builtin_text(name)))
        trace = run_dynamic(built.game, built.run, built.algorithm, built.w0, built.s0)
        final = trace.final
        cert = certify_nash(built.game, final.w, final.s, 1e-6)
        path = os.path.join(args.out, f"{name}.csv")
        write_trace_csv(trace, path)
        print(
            f"{name:18s} {built.algorithm:16s} outcome={trace.outcome:9s} "
            f"rounds={final.t:5d} welfare={final.welfare:.6f} "
            f"s={np.array2string(final.s, precision=4)} "
            f"final profile {cert.as_dict()['verdict']}"
        )
        print(f"{'':18s} wrote {path}")


if __name__ == "__main__":
    main()
