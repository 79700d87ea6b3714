import glob
import os

import pytest

from tscl.config import ExperimentConfig, load_config, parse_config, serialize_config
from tscl.errors import ConfigError
from tscl.evaluation import HORIZONS

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIGS = sorted(glob.glob(os.path.join(ROOT, "configs", "*.ini")))

BASE = """
[experiment]
name = t
methods = MSE, MSE+MoCo2
horizons = 24, 48
seeds = 0, 1

[backbone]
kind = Transformer
num_layers = 1

[train]
epochs = 3
peak_lr = 0.0001
"""


def test_round_trip_is_stable():
    cfg = parse_config(BASE)
    assert cfg.backbone.kind == "Transformer" and cfg.backbone.hidden_dim == 128 and cfg.backbone.num_layers == 1
    assert cfg.experiment.methods == ("MSE", "MSE+MoCo2")
    assert cfg.train.peak_lr == 0.0001
    again = parse_config(serialize_config(cfg))
    assert again == cfg
    assert serialize_config(again) == serialize_config(cfg)


def test_defaults_when_sections_absent():
    cfg = parse_config("[experiment]\nname = x\n")
    assert cfg.experiment.strategy == "end_to_end" and cfg.backbone.kind == "TCN"
    assert cfg == parse_config(serialize_config(cfg))


@pytest.mark.parametrize("text,where", [
    ("[experiment]\nbogus = 1\n", "experiment.bogus"),
    ("[whatever]\na = 1\n", "whatever"),
    ("[train]\nepochs = many\n", "train.epochs"),
    ("[experiment]\nstrategy = three_step\n", "experiment.strategy"),
    ("[experiment]\nhorizons = 0\n", "experiment.horizons"),
    ("[data]\nkind = ETT\n", "data.path"),
    ("[backbone]\nkind = GRU\n", "backbone.kind"),
    ("[backbone]\nkind = Transformer\nhidden_dim = 130\n", "backbone"),
    ("[experiment]\nhorizons = 4\n[erf]\ntarget_step = 4\n", "erf.target_step"),
])
def test_errors_name_the_offending_key(text, where):
    with pytest.raises(ConfigError, match=where.replace(".", r"\.")):
        parse_config(text)


@pytest.mark.parametrize("strategy,method,ok", [
    ("end_to_end", "MSE", True),
    ("end_to_end", "MSE+MoCo2+HCL", True),
    ("end_to_end", "MoCo2", False),
    ("two_step_ridge", "MoCo2", True),
    ("two_step_ridge", "MSE", False),
    ("two_step_mlp", "HCL", True),
    ("finetune", "MoCo1", True),
    ("finetune", "MSE+HCL", False),
])
def test_strategy_method_compatibility(strategy, method, ok):
    text = f"[experiment]\nstrategy = {strategy}\nmethods = {method}\n"
    if ok:
        parse_config(text)
    else:
        with pytest.raises(ConfigError, match="experiment.methods"):
            parse_config(text)


def test_sscl_sections_rejected_without_sscl_method():
    with pytest.raises(ConfigError, match=r"loss\.queue_size"):
        parse_config("[experiment]\nmethods = MSE\n[loss]\nqueue_size = 8\n")
    with pytest.raises(ConfigError, match=r"augment\.mask_prob"):
        parse_config("[experiment]\nmethods = MSE\n[augment]\nmask_prob = 0.2\n")
    assert "[loss]" not in serialize_config(parse_config("[experiment]\nmethods = MSE\n"))


@pytest.mark.parametrize("path", CONFIGS, ids=os.path.basename)
def test_shipped_configs_parse(path):
    cfg = load_config(path)
    assert isinstance(cfg, ExperimentConfig)
    if cfg.data.name in HORIZONS and os.path.basename(path).startswith("full_recipe"):
        assert cfg.experiment.horizons == HORIZONS[cfg.data.name]
