"""Command line entry point: ``tscl prepare|run|table|erf``.

Exit codes: 0 ok, 2 config error, 3 divergence, 4 missing data, 1 anything else.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING_DATA = 0, 1, 2, 3, 4


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.experiment.seeds = (args.seed,)
    if args.device:
        cfg.train = dataclasses.replace(cfg.train, device=args.device)
    if args.raw_scale_metrics:
        cfg.experiment.raw_scale_metrics = True
    if getattr(args, "output_dir", None):
        cfg.experiment.output_dir = args.output_dir
    return cfg


def cmd_prepare(args) -> int:
    from .data import SplitSpec, file_checksum, hourly_aggregate, load_csv, prepare, save_prepared, synthetic_series
    from .errors import DatasetNotFound

    if args.dataset == "synthetic":
        series = synthetic_series(seed=args.seed or 0)
        name = "synthetic"
    else:
        if not os.path.isfile(args.dataset):
            raise DatasetNotFound(f"no file at {args.dataset!r}")
        series = load_csv(args.dataset, args.kind, forward_fill=args.forward_fill)
        series.metadata["checksum"] = file_checksum(args.dataset)
        name = args.name or os.path.splitext(os.path.basename(args.dataset))[0]
    if args.hourly:
        series = hourly_aggregate(series)
    data = prepare(series, name, SplitSpec(*args.split))
    if args.dry_run:
        print(f"{name}: {len(series)} rows, splits at {data.boundaries}")
        return EXIT_OK
    for path in save_prepared(data, args.out):
        print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    from .config import load_config
    from .runner import plan, run_experiment

    cfg = _apply_overrides(load_config(args.config), args)
    cfg.validate()
    if args.dry_run:
        print(f"config ok: {args.config}")
        for line in plan(cfg):
            print("  " + line)
        return EXIT_OK
    result = run_experiment(cfg, parallel=args.parallel)
    if result.table is not None:
        sys.stdout.write(result.table.render())
    print(f"run directory: {result.run_dir}")
    if result.diverged:
        print("one or more cells diverged", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


def cmd_table(args) -> int:
    from .runner import merge_tables

    table = merge_tables(args.dirs, args.out)
    sys.stdout.write(table.render())
    for d, h, m in table.missing():
        print(f"missing: {d} {h} {m}", file=sys.stderr)
    return EXIT_OK


def cmd_erf(args) -> int:
    import numpy as np

    from .config import load_config
    from .erf import emit_heatmap, erf_gradient, erf_stats
    from .runner import erf_windows, load_dataset
    from .strategy import load_model

    cfg = _apply_overrides(load_config(args.config), args)
    if args.dry_run:
        print(f"config ok: {args.config}")
        return EXIT_OK
    model = load_model(args.checkpoint)
    data = load_dataset(cfg.data)
    out_dir = args.out or os.path.join(args.checkpoint, "erf")
    name = os.path.basename(os.path.normpath(args.checkpoint))
    windows = list(erf_windows(cfg, data, model.horizon))
    maps = [(i, w, erf_gradient(model, w, g, cfg.erf.target_step)) for i, w, g in windows]
    vmax = (max(float(np.abs(m.grads).max()) for _, _, m in maps)
            if cfg.erf.shared_scale and maps else None)
    print("window,period,period_mass,entropy")
    for i, w, m in maps:
        emit_heatmap(m, out_dir, name, i, w, vmax)
        st = erf_stats(m, w)
        print(f"{i},{st.period or ''},{st.period_mass:.6f},{st.entropy:.6f}")
    print(f"written to {out_dir}", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run a single seed instead of the config's list")
    common.add_argument("--device", default=None, help="torch device, e.g. cpu or cuda:0")
    common.add_argument("--raw-scale-metrics", action="store_true",
                        help="score in the original units instead of the normalized scale")
    common.add_argument("--parallel", type=int, default=1, metavar="N", help="worker processes")
    common.add_argument("--dry-run", action="store_true", help="validate inputs only")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="tscl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", parents=[common], help="validate, split and normalize a dataset")
    p.add_argument("dataset", help="CSV path, or 'synthetic'")
    p.add_argument("--kind", default="ETT", choices=("ETT", "ECL", "custom"))
    p.add_argument("--name", default=None)
    p.add_argument("--out", default="prepared")
    p.add_argument("--hourly", action="store_true", help="aggregate sub-hourly rows to hourly means")
    p.add_argument("--forward-fill", action="store_true")
    p.add_argument("--split", type=float, nargs=3, default=(0.6, 0.2, 0.2), metavar=("TRAIN", "VAL", "TEST"))
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("run", parents=[common], help="run an experiment config")
    p.add_argument("config")
    p.add_argument("--output-dir", default=None, help="override [experiment] output_dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("table", parents=[common], help="merge run directories into one results table")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", default=None, help="write results.csv/txt, per_seed.csv and a figure here")
    p.set_defaults(func=cmd_table)

    p = sub.add_parser("erf", parents=[common], help="receptive-field heatmaps for a saved model")
    p.add_argument("checkpoint")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_erf)
    return parser


def main(argv=None) -> int:
    from .errors import ConfigError, DataError, Divergence

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Divergence as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_MISSING_DATA
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
