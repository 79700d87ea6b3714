"""End-to-end acceptance checks, one test per criterion.

The ETTh1 checks need the real file: set TSCL_ETTH1 or place it at
data/ETTh1.csv. Without it they fail and say so.
"""
import copy
import dataclasses
import glob
import os
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from helpers import central_difference, rel_error
from tscl.backbone import EncoderSpec, build_encoder, param_count, tcn_receptive_field
from tscl.config import load_config
from tscl.data import prepare, synthetic_series, window_starts
from tscl.erf import erf_gradient, erf_stats
from tscl.evaluation import HORIZONS
from tscl.losses import LossConfig
from tscl.runner import read_cells, run_experiment
from tscl.strategy import (TrainConfig, encoder_checksum, fit_frozen_ridge, pretrain_sscl,
                           train_end_to_end, train_frozen_mlp)

pytestmark = pytest.mark.acceptance

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TESTS = os.path.join(ROOT, "tests")
UNIT_FILES = sorted(f for f in glob.glob(os.path.join(TESTS, "test_*.py"))
                    if not f.endswith("test_acceptance.py"))
ACCEPT_RUNS = os.path.join(ROOT, "runs", "acceptance")


# ----------------------------------------------------------------- 1
def test_criterion_1_property_suite_under_two_minutes():
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "pytest", "-q", "-m", "not slow",
                           "-p", "no:cacheprovider", *UNIT_FILES],
                          cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - t0
    tail = "\n".join(proc.stdout.strip().splitlines()[-15:])
    assert proc.returncode == 0, tail
    assert elapsed < 120, f"took {elapsed:.1f}s"


# ----------------------------------------------------------------- 2
@pytest.mark.parametrize("kind,target", [("LSTM", 660_000), ("TCN", 637_000), ("Transformer", 655_000)])
def test_criterion_2_parameter_budgets(kind, target):
    count = param_count(build_encoder(EncoderSpec.default(kind, 7), seed=0))
    print(f"{kind}: {count} parameters (target {target})")
    assert abs(count - target) <= 0.02 * target


# ------------------------------------------------------------ 3 and 4
def etth1_path():
    path = os.environ.get("TSCL_ETTH1") or os.path.join(ROOT, "data", "ETTh1.csv")
    if not os.path.isfile(path):
        pytest.fail(f"ETTh1.csv not found at {path}; set TSCL_ETTH1 to run this check")
    return path


def desk_run(name, kind, strategy, methods, path):
    """One ETTh1-24 three-seed run; cells already computed under ``name`` are reused."""
    cfg = load_config(os.path.join(ROOT, "configs", "etth1_desk.ini"))
    cfg.experiment.name, cfg.experiment.strategy = name, strategy
    cfg.experiment.methods = tuple(methods)
    cfg.experiment.output_dir = ACCEPT_RUNS
    cfg.data.path = path
    if kind != "Transformer":
        cfg.backbone = EncoderSpec.default(kind, 0)
        cfg.train = dataclasses.replace(cfg.train, peak_lr=1e-3)
    result = run_experiment(cfg)
    means = {}
    for c in result.cells:
        means.setdefault(c["method"], []).append(c["mse"])
    return {m: float(np.mean(v)) for m, v in means.items()}


@pytest.mark.slow
@pytest.mark.parametrize("kind", ["Transformer", "TCN"])
def test_criterion_3_desk_directional_reproduction(kind):
    path = etth1_path()
    means = desk_run(f"etth1_e2e_{kind.lower()}", kind, "end_to_end", ("MSE", "MSE+MoCo2"), path)
    print(f"{kind}: {means}")
    assert means["MSE+MoCo2"] <= means["MSE"] + 0.03


@pytest.mark.slow
def test_criterion_4_strategy_orderings():
    path = etth1_path()
    sscl = ("HCL", "MoCo1", "MoCo2", "MoCo2+HCL")
    e2e = desk_run("etth1_e2e_tcn", "TCN", "end_to_end", ["MSE+" + a for a in sscl], path)
    two_step = {}
    for strategy in ("two_step_ridge", "two_step_mlp", "finetune"):
        two_step.update(desk_run(f"etth1_{strategy}_tcn", "TCN", strategy, sscl, path))
    best_e2e = min(v for k, v in e2e.items() if k != "MSE")
    best_two = min(two_step.values())
    print(f"best end-to-end {best_e2e:.4f}, best two-step {best_two:.4f}")
    assert best_e2e <= best_two + 0.02

    lstm = {}
    for strategy in ("two_step_mlp", "two_step_ridge"):
        lstm.update(desk_run(f"etth1_{strategy}_lstm", "LSTM", strategy, ("MoCo2",), path))
    print(f"frozen LSTM: {lstm}")
    assert min(lstm.values()) > 0.9


# ----------------------------------------------------------------- 5
@pytest.mark.slow
def test_criterion_5_pretraining_contract():
    data = prepare(synthetic_series(2000), "synthetic")
    spec = EncoderSpec.default("TCN", 7)
    cfg = TrainConfig(seed=0)
    assert cfg.pretrain_iters == 600
    encoder, report = pretrain_sscl(spec, "MoCo2", data, cfg, lookback=24)
    assert report.optimizer_steps == 600 and len(report.losses) == 600
    before = encoder_checksum(encoder)

    ridge = fit_frozen_ridge(encoder, data, 24, 24, max_windows=512)
    assert encoder_checksum(ridge.encoder) == before
    mlp, _ = train_frozen_mlp(encoder, data, TrainConfig(epochs=1, max_steps_per_epoch=20), 24, 24)
    assert encoder_checksum(mlp.encoder) == before
    assert encoder_checksum(encoder) == before


# ----------------------------------------------------------------- 6
ERF_LOOKBACK, ERF_HORIZON, PERIOD = 96, 24, 24


def erf_spec():
    return EncoderSpec.default("TCN", 7, hidden_dim=64, width=64, num_layers=3)


def period_mass(model, data):
    """Mean period-lag attribution mass over eight evenly spaced validation windows."""
    starts = window_starts(len(data.val.values), ERF_LOOKBACK, ERF_HORIZON)
    picks = starts[np.linspace(0, len(starts) - 1, 8).round().astype(int)]
    masses = []
    for s in picks:
        window = data.val.values[s:s + ERF_LOOKBACK]
        gold = data.val.values[s + ERF_LOOKBACK:s + ERF_LOOKBACK + ERF_HORIZON]
        masses.append(erf_stats(erf_gradient(model, window, gold, 0), window, PERIOD).period_mass)
    return float(np.mean(masses))


@pytest.mark.slow
def test_criterion_6_erf_period_attribution():
    t0 = time.perf_counter()
    data = prepare(synthetic_series(2000, 7, PERIOD, 0.1, 0), "synthetic")
    spec = erf_spec()
    R = tcn_receptive_field(spec)
    # last_t readout: the earliest read step, L - T, sees back R - 1 more inputs
    first_visible = ERF_LOOKBACK - ERF_HORIZON - R + 1
    assert first_visible > 0
    loss_cfg = LossConfig(queue_size=1024, proj_dim=32)
    wins, rows = 0, []
    for seed in range(3):
        masses = {}
        for method in ("MSE", "MSE+MoCo2"):
            model, _ = train_end_to_end(spec, method, data, TrainConfig(epochs=10, seed=seed),
                                        ERF_HORIZON, ERF_LOOKBACK, loss_cfg)
            masses[method] = period_mass(model, data)
            window = data.val.values[:ERF_LOOKBACK]
            gold = data.val.values[ERF_LOOKBACK:ERF_LOOKBACK + ERF_HORIZON]
            mag = erf_gradient(model, window, gold, 0).magnitude
            assert np.all(mag[:first_visible] == 0)
            assert mag[first_visible:].max() > 0
            if seed == 0 and method == "MSE+MoCo2":
                check_erf_finite_differences(model, window, gold)
        rows.append((seed, masses["MSE"], masses["MSE+MoCo2"]))
        wins += masses["MSE+MoCo2"] > masses["MSE"]
    for seed, a, b in rows:
        print(f"seed {seed}: period mass MSE {a:.4f}, MSE+MoCo2 {b:.4f}")
    assert wins >= 2
    assert time.perf_counter() - t0 < 600


def check_erf_finite_differences(model, window, gold):
    model = copy.deepcopy(model).double()
    x = torch.tensor(window[-40:], dtype=torch.float64)
    prefix = torch.tensor(window[:-40], dtype=torch.float64)
    y = torch.tensor(gold, dtype=torch.float64)

    def loss(tail):
        full = torch.cat([prefix, tail]).unsqueeze(0)
        return ((y[0] - model(full)[0, 0]) ** 2).sum()

    got = torch.tensor(erf_gradient(model, window, gold, 0).grads[-40:])
    assert rel_error(got, central_difference(loss, x)) < 1e-6


# ----------------------------------------------------------------- 7
def test_criterion_7_recipe_configs_shipped():
    found = {}
    for path in glob.glob(os.path.join(ROOT, "configs", "full_recipe_*.ini")):
        cfg = load_config(path)
        found[cfg.data.name] = cfg
        with open(path) as fh:
            assert fh.readline().startswith("#")  # documented in place
    assert set(found) == set(HORIZONS)
    for name, cfg in found.items():
        assert cfg.experiment.horizons == HORIZONS[name]
        assert cfg.experiment.strategy == "end_to_end" and len(cfg.experiment.methods) == 5
