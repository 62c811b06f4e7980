"""Command-line entry point.

Exit status: 0 on success, 1 on config or I/O errors, 2 when training diverges.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, server
from .client import DivergenceError

log = logging.getLogger("fedgradnorm")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="fedgradnorm",
        description="Simulate personalised federated multi-task training with "
        "gradient-norm loss weighting or equal weighting.",
    )
    ap.add_argument("--config", required=True, help="TOML experiment config")
    ap.add_argument("--strategy", choices=server.STRATEGIES, help="override the config strategy")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--rounds", type=int, help="override the number of rounds")
    ap.add_argument("--out", help="metrics CSV path (with --compare: a prefix)")
    ap.add_argument("--compare", action="store_true", help="run both strategies")
    return ap


def _with_suffix(out: str, strategy: str) -> str:
    p = Path(out)
    return str(p.with_name(f"{p.stem}.{strategy}{p.suffix or '.csv'}"))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = harness.load_config(args.config)
        overrides = {}
        if args.strategy:
            overrides["strategy"] = args.strategy
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.rounds is not None:
            overrides["rounds"] = args.rounds
        if args.out:
            overrides["output"] = args.out
        config = replace(config, **overrides)

        if args.compare:
            comparison = harness.compare_strategies(config)
            if config.output:
                for strategy, result in comparison.runs.items():
                    path = _with_suffix(config.output, strategy)
                    harness.write_metrics(result.metrics, path, config.n)
                    log.info("wrote %s", path)
            json.dump(comparison.summary, sys.stdout, indent=2)
            sys.stdout.write("\n")
        else:
            result = harness.run(config)
            if not config.output:
                sys.stdout.write(harness.metrics_csv(result.metrics, config.n))
            else:
                log.info("wrote %s", config.output)
            summary = harness.summarize(result)
            log.info(
                "final losses %s, weights %s",
                ["%.4g" % v for v in summary["final_losses"]],
                ["%.4g" % v for v in summary["final_weights"]],
            )
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return 2
    except (harness.ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
