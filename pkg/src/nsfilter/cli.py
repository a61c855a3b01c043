"""Command-line entry point: ``nsfilter {list-presets, generate-data, run, aggregate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import scipy.fft as sfft

from .config import VARIANTS, ConfigError, presets, resolve_config
from .harness import FilterStepError, aggregate_runs, generate_dataset, run_experiment


def _configure(args):
    cfg = resolve_config(args.config)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "truth_seed", None) is not None:
        changes["truth_seed"] = args.truth_seed
    if getattr(args, "variant", None) is not None:
        changes["variant"] = args.variant
    return cfg.with_(**changes) if changes else cfg


def cmd_list(args) -> int:
    for name, cfg in sorted(presets().items()):
        print(f"{name:32s} L={cfg.L:<3d} N={cfg.n_particles:<4d} n={cfg.n_obs:<4d} "
              f"dt_obs={cfg.obs_interval:<5g} Sigma={cfg.obs_sigma:<5g} {cfg.variant}")
    return 0


def cmd_generate(args) -> int:
    cfg = _configure(args)
    out = Path(args.out)
    with sfft.set_workers(args.threads):
        ds = generate_dataset(cfg)
    path = out / f"data-{cfg.data_hash()}.npz"
    ds.save(path)
    print(path)
    return 0


def cmd_run(args) -> int:
    cfg = _configure(args)
    metrics = run_experiment(cfg, args.out, threads=args.threads, data_dir=args.data_dir)
    print(json.dumps(metrics.summary(), indent=1, sort_keys=True))
    return 0


def cmd_aggregate(args) -> int:
    result = aggregate_runs(args.runs, args.out)
    print(json.dumps(result, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nsfilter", description="Particle filtering for stochastic Navier-Stokes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-step progress")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("list-presets", help="show the named configurations").set_defaults(func=cmd_list)

    def common(sp, out_help):
        sp.add_argument("--config", required=True, help="preset name or path to a JSON config")
        sp.add_argument("--out", required=True, help=out_help)
        sp.add_argument("--truth-seed", type=int, help="override the data seed")
        sp.add_argument("--threads", type=int, default=1, help="FFT worker threads (results do not depend on it)")

    g = sub.add_parser("generate-data", help="simulate the truth and write the observation record")
    common(g, "directory for the data file")
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("run", help="run one filter and write a run directory")
    common(r, "run directory")
    r.add_argument("--seed", type=int, help="filter seed")
    r.add_argument("--variant", choices=VARIANTS, help="override the filter variant")
    r.add_argument("--data-dir", help="data cache directory (default: <out>/data)")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("aggregate", help="mean and sd of per-step metrics over runs")
    a.add_argument("runs", nargs="+", help="run directories of one configuration")
    a.add_argument("--out", help="write the aggregate table to this CSV file")
    a.set_defaults(func=cmd_aggregate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except (FilterStepError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
