"""Experiment runner: data -> train -> evaluate -> (optional) ERF, one run directory per config.

Run directory layout::

    config.ini          resolved config snapshot (reproduces the run on its own)
    cells.csv           one row per (dataset, horizon, method, seed), appended as cells finish
    results.csv/.txt    seed-averaged table, plus per_seed.csv sidecar
    metrics.json        averages and cell list
    models/ encoders/   checkpoints
    curves/             per-cell epoch CSVs and training-curve PNGs
    erf/                gradient CSVs, heatmaps, erf_stats.csv
    status.txt          ok | diverged | failed: <reason>
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig, save_config
from .data import (SplitSpec, file_checksum, hourly_aggregate, load_csv, prepare,
                   synthetic_series, window_starts)
from .errors import ConflictingCells, DatasetNotFound
from .evaluation import ResultsTable, evaluate_model
from .strategy import (encoder_checksum, finetune, fit_frozen_ridge, load_model, pretrain_sscl,
                       save_model, train_end_to_end, train_frozen_mlp)

log = logging.getLogger(__name__)

CELL_FIELDS = ["dataset", "horizon", "method", "seed", "mse", "mae", "status", "best_epoch",
               "optimizer_steps", "wall_clock", "checkpoint"]
STRATEGY_SUFFIX = {"two_step_ridge": "ridge", "two_step_mlp": "mlp", "finetune": "FT"}


def method_label(strategy: str, method: str) -> str:
    return method if strategy == "end_to_end" else f"{method}/{STRATEGY_SUFFIX[strategy]}"


def load_dataset(data_cfg, min_rows: int = 1):
    """PreparedData for a [data] section; file datasets must exist on disk."""
    split = SplitSpec(data_cfg.train_fraction, data_cfg.val_fraction, data_cfg.test_fraction)
    if data_cfg.kind == "synthetic":
        series = synthetic_series(data_cfg.synthetic_rows, data_cfg.synthetic_features,
                                  data_cfg.synthetic_period, data_cfg.synthetic_noise,
                                  data_cfg.synthetic_seed)
    else:
        if not os.path.isfile(data_cfg.path):
            raise DatasetNotFound(f"{data_cfg.name}: no file at {data_cfg.path!r}")
        series = load_csv(data_cfg.path, data_cfg.kind, forward_fill=data_cfg.forward_fill)
        series.metadata["checksum"] = file_checksum(data_cfg.path)
    if data_cfg.hourly:
        series = hourly_aggregate(series)
    return prepare(series, data_cfg.name, split, min_rows=min_rows)


def resolve(cfg: ExperimentConfig, data=None) -> ExperimentConfig:
    """Fill data-dependent fields (input_dim) so the snapshot is self-contained."""
    cfg = copy.deepcopy(cfg)
    if cfg.backbone.input_dim <= 0:
        data = data or load_dataset(cfg.data)
        cfg.backbone = dataclasses.replace(cfg.backbone, input_dim=data.num_features)
    return cfg


@dataclass
class RunResult:
    run_dir: str
    cells: list = field(default_factory=list)
    table: ResultsTable | None = None
    status: str = "ok"

    @property
    def diverged(self) -> bool:
        return any(c["status"] == "diverged" for c in self.cells)


def _save_curves(report, run_dir, tag):
    from .plotting import training_curves

    if not getattr(report, "epochs", None):
        return
    os.makedirs(os.path.join(run_dir, "curves"), exist_ok=True)
    report.write_epochs_csv(os.path.join(run_dir, "curves", f"{tag}.csv"))
    training_curves(report.epochs, os.path.join(run_dir, "curves", f"{tag}.png"), title=tag)


def _cell(cfg, data, horizon, method, seed, model, report, checkpoint):
    lookback = cfg.data.lookback_for(horizon)
    metrics = evaluate_model(model, data.test, lookback, horizon,
                             max_windows=cfg.data.max_test_windows,
                             normalizer=data.normalizer, raw_scale=cfg.experiment.raw_scale_metrics,
                             device=cfg.train.device)
    return {"dataset": cfg.data.name, "horizon": horizon,
            "method": method_label(cfg.experiment.strategy, method), "seed": seed,
            "mse": metrics["mse"], "mae": metrics["mae"],
            "status": getattr(report, "status", "converged"),
            "best_epoch": getattr(report, "best_epoch", -1),
            "optimizer_steps": getattr(report, "optimizer_steps", 0),
            "wall_clock": round(getattr(report, "wall_clock", 0.0), 3),
            "checkpoint": os.path.relpath(checkpoint, cfg_run_dir(cfg))}


def cfg_run_dir(cfg: ExperimentConfig) -> str:
    return os.path.join(cfg.experiment.output_dir, cfg.experiment.name)


def run_job(cfg: ExperimentConfig, seed: int, method: str, horizons) -> list[dict]:
    """One unit of work. End-to-end jobs cover a single horizon; two-step jobs
    pretrain once (at the longest lookback) and then fit a head per horizon."""
    run_dir = cfg_run_dir(cfg)
    data = load_dataset(cfg.data)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    exp = cfg.experiment
    cells = []
    if exp.strategy == "end_to_end":
        for h in horizons:
            tag = f"{method}_h{h}_s{seed}".replace("+", "-")
            model, report = train_end_to_end(cfg.backbone, method, data, tcfg, h,
                                             cfg.data.lookback_for(h), cfg.loss, cfg.augment,
                                             exp.readout)
            path = os.path.join(run_dir, "models", tag)
            save_model(model, path)
            _save_curves(report, run_dir, tag)
            cells.append(_cell(cfg, data, h, method, seed, model, report, path))
        return cells

    lookback = max(cfg.data.lookback_for(h) for h in horizons)
    enc_dir = os.path.join(run_dir, "encoders", f"{method}_s{seed}".replace("+", "-"))
    encoder, pre = pretrain_sscl(cfg.backbone, method, data, tcfg, lookback, cfg.loss,
                                 cfg.augment, out_dir=enc_dir)
    before = encoder_checksum(encoder)
    for h in horizons:
        tag = f"{method}_{STRATEGY_SUFFIX[exp.strategy]}_h{h}_s{seed}".replace("+", "-")
        L = cfg.data.lookback_for(h)
        report = pre
        if exp.strategy == "two_step_ridge":
            model = fit_frozen_ridge(copy.deepcopy(encoder), data, h, L, exp.ridge_alphas,
                                     exp.readout, max_windows=exp.max_ridge_windows,
                                     device=tcfg.device)
        elif exp.strategy == "two_step_mlp":
            model, report = train_frozen_mlp(copy.deepcopy(encoder), data, tcfg, h, L, exp.readout)
        else:
            model, report = finetune(encoder, data, tcfg, h, L, readout_mode=exp.readout)
        path = os.path.join(run_dir, "models", tag)
        save_model(model, path)
        if exp.strategy != "two_step_ridge":
            _save_curves(report, run_dir, tag)
        cell = _cell(cfg, data, h, method, seed, model, report, path)
        if pre.status == "diverged":
            cell["status"] = "diverged"
        if exp.strategy != "finetune" and encoder_checksum(model.encoder) != before:
            raise RuntimeError(f"frozen encoder changed during head training ({tag})")
        cells.append(cell)
    return cells


def _append_cells(path, cells):
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, CELL_FIELDS)
        if new:
            writer.writeheader()
        for cell in cells:
            writer.writerow(cell)


def read_cells(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["horizon"], row["seed"] = int(row["horizon"]), int(row["seed"])
        row["mse"], row["mae"] = float(row["mse"]), float(row["mae"])
    return rows


def table_from_cells(cells, methods=None) -> ResultsTable:
    """Average seeds per (dataset, horizon, method); ``n`` records the seed count."""
    groups: dict = {}
    for c in cells:
        groups.setdefault((c["dataset"], int(c["horizon"]), c["method"]), []).append(c)
    table = ResultsTable(methods)
    for (d, h, m), rows in groups.items():
        table.add(d, h, m, float(np.mean([r["mse"] for r in rows])),
                  float(np.mean([r["mae"] for r in rows])), n_seeds=len(rows))
    return table


def write_per_seed(cells, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["dataset", "horizon", "method", "seed", "mse", "mae"])
        for c in sorted(cells, key=lambda c: (c["dataset"], int(c["horizon"]), c["method"], int(c["seed"]))):
            writer.writerow([c["dataset"], c["horizon"], c["method"], c["seed"],
                             f"{float(c['mse']):.6f}", f"{float(c['mae']):.6f}"])


def write_reports(cells, out_dir, methods=None) -> ResultsTable:
    """results.csv, results.txt, per_seed.csv, metrics.json and a bar chart."""
    from .plotting import results_bars

    table = table_from_cells(cells, methods)
    table.to_csv(os.path.join(out_dir, "results.csv"))
    with open(os.path.join(out_dir, "results.txt"), "w") as fh:
        fh.write(table.render())
        for d, h, m in table.missing():
            fh.write(f"missing: {d} {h} {m}\n")
    write_per_seed(cells, os.path.join(out_dir, "per_seed.csv"))
    metrics = {
        "averages": {m: table.average(m) for m in table.methods},
        "cells": [{"dataset": d, "horizon": h, "method": m, **c}
                  for (d, h, m), c in table.cells.items()],
        "missing": [list(x) for x in table.missing()],
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(metrics, fh, indent=2)
    if table.methods:
        results_bars(table, os.path.join(out_dir, "results_mse.png"), "mse")
    return table


def _jobs(cfg: ExperimentConfig):
    exp = cfg.experiment
    for seed in exp.seeds:
        for method in exp.methods:
            if exp.strategy == "end_to_end":
                for h in exp.horizons:
                    yield seed, method, (h,)
            else:
                yield seed, method, tuple(exp.horizons)


def plan(cfg: ExperimentConfig) -> list[str]:
    return [f"seed={s} method={m} horizons={','.join(map(str, hs))}" for s, m, hs in _jobs(cfg)]


def run_experiment(cfg: ExperimentConfig, parallel: int = 1) -> RunResult:
    """Execute every cell of the config's matrix and write the run directory.

    Cells already present in ``cells.csv`` from an earlier, interrupted run are
    kept and skipped.
    """
    data = load_dataset(cfg.data)
    cfg = resolve(cfg, data)
    cfg.validate()
    run_dir = cfg_run_dir(cfg)
    os.makedirs(run_dir, exist_ok=True)
    save_config(cfg, os.path.join(run_dir, "config.ini"))
    cells_path = os.path.join(run_dir, "cells.csv")
    result = RunResult(run_dir)
    done = set()
    if os.path.exists(cells_path):
        result.cells = read_cells(cells_path)
        done = {(c["method"], c["seed"], c["horizon"]) for c in result.cells}
    jobs = [(s, m, hs) for s, m, hs in _jobs(cfg)
            if any((method_label(cfg.experiment.strategy, m), s, h) not in done for h in hs)]

    def collect(cells):
        _append_cells(cells_path, cells)
        result.cells.extend(cells)

    status = "ok"
    try:
        if parallel > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=parallel) as pool:
                futures = [pool.submit(run_job, cfg, s, m, hs) for s, m, hs in jobs]
                for fut in as_completed(futures):
                    collect(fut.result())
        else:
            for s, m, hs in jobs:
                log.info("running seed=%s method=%s horizons=%s", s, m, hs)
                collect(run_job(cfg, s, m, hs))
        if cfg.erf.enabled:
            run_erf(cfg, data, result.cells)
    except Exception as exc:
        status = f"failed: {type(exc).__name__}: {exc}"
        raise
    finally:
        methods = [method_label(cfg.experiment.strategy, m) for m in cfg.experiment.methods]
        if result.cells:
            result.table = write_reports(result.cells, run_dir, methods)
        if status == "ok" and result.diverged:
            status = "diverged"
        result.status = status
        with open(os.path.join(run_dir, "status.txt"), "w") as fh:
            fh.write(status + "\n")
    return result


def erf_windows(cfg: ExperimentConfig, data, horizon: int):
    L = cfg.data.lookback_for(horizon)
    starts = window_starts(len(data.val.values), L, horizon)
    for i in cfg.erf.windows:
        s = starts[i % len(starts)]
        yield i, data.val.values[s:s + L], data.val.values[s + L:s + L + horizon]


def run_erf(cfg: ExperimentConfig, data, cells) -> str:
    """Heatmaps and period-lag statistics for every model trained at the first horizon."""
    from .erf import emit_heatmap, erf_gradient, erf_stats

    out_dir = os.path.join(cfg_run_dir(cfg), "erf")
    os.makedirs(out_dir, exist_ok=True)
    horizon = cfg.experiment.horizons[0]
    chosen = [c for c in cells if int(c["horizon"]) == horizon]
    models = {(c["method"], int(c["seed"])): load_model(os.path.join(cfg_run_dir(cfg), c["checkpoint"]))
              for c in chosen}
    rows = []
    for idx, window, gold in erf_windows(cfg, data, horizon):
        maps = {key: erf_gradient(model, window, gold, cfg.erf.target_step)
                for key, model in models.items()}
        vmax = max(float(np.abs(m.grads).max()) for m in maps.values()) if cfg.erf.shared_scale else None
        for (method, seed), erf_map in maps.items():
            name = f"{method}_s{seed}".replace("+", "-").replace("/", "-")
            emit_heatmap(erf_map, out_dir, name, idx, window, vmax)
            st = erf_stats(erf_map, window)
            rows.append([method, seed, idx, cfg.erf.target_step, st.period or "",
                         f"{st.period_mass:.6f}", f"{st.entropy:.6f}"])
    path = os.path.join(out_dir, "erf_stats.csv")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "seed", "window", "target_step", "period", "period_mass", "entropy"])
        writer.writerows(rows)
    return path


def merge_tables(run_dirs, out_dir=None) -> ResultsTable:
    """Union of several runs' cells, seeds averaged per cell.

    The same (dataset, horizon, method, seed) appearing in two runs with
    different numbers is a conflict; exact duplicates are collapsed.
    """
    merged: dict = {}
    methods: list = []
    for d in run_dirs:
        path = os.path.join(d, "cells.csv")
        if not os.path.exists(path):
            raise DatasetNotFound(f"{d}: no cells.csv")
        for c in read_cells(path):
            key = (c["dataset"], c["horizon"], c["method"], c["seed"])
            if c["method"] not in methods:
                methods.append(c["method"])
            prev = merged.get(key)
            if prev is not None and (prev["mse"], prev["mae"]) != (c["mse"], c["mae"]):
                raise ConflictingCells(f"{key} differs between runs: {prev['mse']} vs {c['mse']}")
            merged[key] = c
    cells = list(merged.values())
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        return write_reports(cells, out_dir, methods)
    return table_from_cells(cells, methods)
