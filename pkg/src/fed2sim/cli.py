"""Command-line entry point: ``fed2sim run|compare|cost-sweep``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import DataError

OUT_ENV = "FED2SIM_OUT"

log = logging.getLogger("fed2sim")


def _out_dir(args, cfg) -> Path:
    # precedence: --out, then the environment, then the config file
    return Path(args.out or os.environ.get(OUT_ENV) or cfg.outputs.dir)


def _load(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise ConfigError(f"--seed: {args.seed} is not an unsigned 64-bit integer")
        cfg = cfg.model_copy(update={"seed": args.seed})
    return cfg


def cmd_run(args) -> int:
    from .experiment import run_experiment
    cfg = _load(args)
    art = run_experiment(cfg, _out_dir(args, cfg))
    last = art.result.metrics[-1]
    print(f"{cfg.federation.aggregation}: {len(art.result.metrics)} rounds, final accuracy {last.accuracy:.4f}")
    for name, path in sorted(art.files.items()):
        print(f"  {name:<17} {path}")
    return 0


def cmd_compare(args) -> int:
    from .report import compare_metrics, format_table, write_compare_csv
    rows = compare_metrics(args.a, args.b)
    print(format_table(rows))
    out = Path(args.out or os.environ.get(OUT_ENV) or ".")
    out.mkdir(parents=True, exist_ok=True)
    print(f"wrote {write_compare_csv(out / 'compare.csv', rows)}")
    return 0


def cmd_cost_sweep(args) -> int:
    from .experiment import write_cost_sweep
    cfg = _load(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    print(f"wrote {write_cost_sweep(cfg, out / 'cost_sweep.csv')}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fed2sim", description="Federated learning simulator: FedAvg vs "
                                "feature-paired averaging on a structure-adapted CNN.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment from a config or a manifest.json")
    run.add_argument("config")
    run.add_argument("--out", help=f"output directory (overrides ${OUT_ENV} and the config)")
    run.add_argument("--seed", type=int, help="override the config seed")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="per-round deltas between two metrics.csv files (B - A)")
    cmp_.add_argument("a")
    cmp_.add_argument("b")
    cmp_.add_argument("--out", help="directory for compare.csv")
    cmp_.set_defaults(func=cmd_compare)

    cost = sub.add_parser("cost-sweep", help="evaluate the communication-cost formulas over a sweep")
    cost.add_argument("config")
    cost.add_argument("--out")
    cost.add_argument("--seed", type=int)
    cost.set_defaults(func=cmd_cost_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as err:
        print(f"invalid config:\n{err}", file=sys.stderr)
    except (DataError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
    return 2


if __name__ == "__main__":
    sys.exit(main())
