"""Run a config through the ITD solver and through the plain round loop.

Prints the weight trajectories side by side; they coincide when the weights
take plain gradient steps.

    python scripts/bilevel_view.py configs/two_task.toml --rounds 10
"""

import argparse
from dataclasses import replace

import numpy as np

from fedgradnorm.bilevel import fedgradnorm_as_bilevel, itd_solve
from fedgradnorm.harness import build_simulation, load_config, simulate


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--rounds", type=int, default=10)
    args = ap.parse_args(argv)

    # the bilevel view covers plain weight steps only
    cfg = replace(load_config(args.config), rounds=args.rounds, weight_optimizer="sgd",
                  strategy="fedgradnorm")
    direct = simulate(build_simulation(cfg)).metrics
    problem, itd = fedgradnorm_as_bilevel(build_simulation(cfg))
    trace = itd_solve(problem, itd).trace

    for m, step in zip(direct, trace):
        gap = np.max(np.abs(np.asarray(m.weight) - step.x_l))
        print(f"round {m.round:3d}  loop {np.round(m.weight, 5)}  itd {np.round(step.x_l, 5)}"
              f"  upper {step.upper:.5g}  lower {step.lower:.3g}  gap {gap:.1e}")


if __name__ == "__main__":
    main()
