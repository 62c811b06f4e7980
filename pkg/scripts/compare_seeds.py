"""Run both weighting strategies over a range of seeds and tabulate the outcome.

    python scripts/compare_seeds.py configs/three_task.toml --seeds 10 --out sweep.csv
"""

import argparse
import csv
import sys
from dataclasses import replace

import numpy as np

from fedgradnorm.harness import compare_strategies, load_config


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, default=10)
    ap.add_argument("--first-seed", type=int, default=0)
    ap.add_argument("--rounds", type=int)
    ap.add_argument("--out", help="per-seed CSV (default: stdout)")
    args = ap.parse_args(argv)

    base = load_config(args.config)
    if args.rounds:
        base = replace(base, rounds=args.rounds)
    rows = []
    for seed in range(args.first_seed, args.first_seed + args.seeds):
        s = compare_strategies(replace(base, seed=seed, output=None), threads=1).summary
        fgn, eq = s["fedgradnorm"], s["equal"]
        rows.append({
            "seed": seed,
            "fedgradnorm_max": fgn["max_normalized_loss"],
            "equal_max": eq["max_normalized_loss"],
            "fedgradnorm_weights": " ".join(f"{w:.4f}" for w in fgn["final_weights"]),
        })
        print(f"seed {seed}: max normalized loss {rows[-1]['fedgradnorm_max']:.4g} "
              f"vs {rows[-1]['equal_max']:.4g}", file=sys.stderr)

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        fh.close()

    wins = sum(r["fedgradnorm_max"] <= r["equal_max"] for r in rows)
    ratio = np.median([r["fedgradnorm_max"] / r["equal_max"] for r in rows])
    print(f"gradient-norm weighting no worse in {wins}/{len(rows)} seeds, "
          f"median ratio {ratio:.3f}", file=sys.stderr)


if __name__ == "__main__":
    main()
