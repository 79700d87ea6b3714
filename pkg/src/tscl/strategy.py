"""Learning strategies: end-to-end joint training, SSCL pretraining followed by a
frozen ridge/MLP head, and pretrain-then-fine-tune."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import Encoder, EncoderSpec, build_encoder
from .checkpoint import load_state, save_state, state_checksum
from .data import PreparedData, gather_windows, window_starts
from .errors import CheckpointMismatch, SingularSystem
from .evaluation import evaluate_model
from .losses import SSCL_ALGORITHMS, LossConfig, SSCLObjective, combined_loss, mse_loss
from .augment import AugmentPolicy

log = logging.getLogger(__name__)

LOSS_CHOICES = ("MSE", "MSE+HCL", "MSE+MoCo1", "MSE+MoCo2", "MSE+MoCo2+HCL")
READOUTS = ("last_t", "last_row")
HEAD_SEED_OFFSET = 1_000_003


def sscl_algorithm(loss_choice: str) -> str | None:
    """Map an end-to-end loss choice (``MSE+MoCo2`` ...) to its SSCL part."""
    choice = loss_choice.replace(" ", "")
    if choice == "MSE+MoCo":
        choice = "MSE+MoCo1"
    if choice not in LOSS_CHOICES:
        raise ValueError(f"unknown loss choice {loss_choice!r}; expected one of {LOSS_CHOICES}")
    return None if choice == "MSE" else choice[len("MSE+"):]


def uses_cosine(algorithm: str | None) -> bool:
    return algorithm is not None and "MoCo2" in algorithm


@dataclass
class TrainConfig:
    peak_lr: float = 1e-3
    epochs: int = 30
    early_stop_patience: int = 3
    scheduler: str = "constant"
    pretrain_iters: int = 600
    batch_size: int = 32
    seed: int = 0
    lam: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_steps_per_epoch: int = 0  # 0 = full pass over the train windows
    max_val_windows: int = 0  # 0 = every validation window
    divergence_factor: float = 10.0
    divergence_patience: int = 100
    device: str = "cpu"

    def __post_init__(self):
        if self.peak_lr < 0:
            raise ValueError("peak_lr must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.scheduler not in ("constant", "cosine"):
            raise ValueError("scheduler must be 'constant' or 'cosine'")


def cosine_lr(step: int, total_steps: int, peak_lr: float) -> float:
    """peak * 0.5 * (1 + cos(pi * step / total)), clamped at the end of the run."""
    if total_steps <= 0:
        return peak_lr
    s = min(step, total_steps)
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * s / total_steps))


def learning_rate(step, total_steps, cfg: TrainConfig, scheduler: str) -> float:
    return cosine_lr(step, total_steps, cfg.peak_lr) if scheduler == "cosine" else cfg.peak_lr


# ------------------------------------------------------------------ heads
def readout(r, horizon: int, mode: str = "last_t"):
    """Flatten the representation rows the head consumes.

    ``last_t`` takes the final min(T, L) rows, zero-padded at the front to T
    rows when T > L; ``last_row`` takes only the final row.
    """
    if mode == "last_row":
        return r[:, -1]
    B, L, d = r.shape
    k = min(horizon, L)
    feats = r[:, L - k:]
    if horizon > L:
        feats = torch.cat([feats.new_zeros(B, horizon - L, d), feats], dim=1)
    return feats.reshape(B, horizon * d)


def readout_dim(spec: EncoderSpec, horizon: int, mode: str) -> int:
    return spec.hidden_dim if mode == "last_row" else horizon * spec.hidden_dim


class MLPHead(nn.Module):
    """One hidden ReLU layer; ``hidden == 0`` collapses it to a single linear map."""

    def __init__(self, in_dim: int, hidden: int, out_dim: int):
        super().__init__()
        self.hidden = hidden
        self.net = (nn.Linear(in_dim, out_dim) if hidden == 0 else
                    nn.Sequential(nn.Linear(in_dim, hidden), nn.ReLU(), nn.Linear(hidden, out_dim)))

    def forward(self, z):
        return self.net(z)


class RidgeHead(nn.Module):
    """Linear map fitted in closed form; weights live in buffers, not parameters."""

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        self.register_buffer("weight", torch.zeros(in_dim, out_dim))
        self.register_buffer("bias", torch.zeros(out_dim))
        self.alpha = float("nan")

    def forward(self, z):
        return z @ self.weight.to(z.dtype) + self.bias.to(z.dtype)


class ForecastModel(nn.Module):
    def __init__(self, encoder: Encoder, head: nn.Module, horizon: int, lookback: int,
                 readout_mode: str = "last_t"):
        super().__init__()
        if readout_mode not in READOUTS:
            raise ValueError(f"readout must be one of {READOUTS}")
        self.encoder, self.head = encoder, head
        self.horizon, self.lookback, self.readout_mode = horizon, lookback, readout_mode
        self.output_dim = encoder.spec.input_dim

    def features(self, x):
        return readout(self.encoder(x), self.horizon, self.readout_mode)

    def forward(self, x):
        out = self.head(self.features(x))
        return out.view(x.shape[0], self.horizon, self.output_dim)

    def describe(self) -> dict:
        spec = {f"encoder.{k}": v for k, v in self.encoder.spec.to_dict().items()}
        head_kind = "ridge" if isinstance(self.head, RidgeHead) else "mlp"
        spec.update({"head": head_kind, "horizon": self.horizon, "lookback": self.lookback,
                     "readout": self.readout_mode})
        if head_kind == "mlp":
            spec["head.hidden"] = self.head.hidden
        else:
            spec["head.alpha"] = self.head.alpha
        return spec


def build_mlp_head(spec: EncoderSpec, horizon: int, readout_mode: str, seed: int,
                   hidden: int | None = None) -> MLPHead:
    in_dim = readout_dim(spec, horizon, readout_mode)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MLPHead(in_dim, spec.hidden_dim if hidden is None else hidden, horizon * spec.input_dim)


def build_forecast_model(spec: EncoderSpec, horizon: int, lookback: int, seed: int = 0,
                         readout_mode: str = "last_t", encoder: Encoder | None = None,
                         head_hidden: int | None = None) -> ForecastModel:
    encoder = build_encoder(spec, seed) if encoder is None else encoder
    head = build_mlp_head(spec, horizon, readout_mode, seed + HEAD_SEED_OFFSET, head_hidden)
    return ForecastModel(encoder, head, horizon, lookback, readout_mode)


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    if text.startswith("(") and text.endswith(")"):
        return tuple(_parse_value(t.strip()) for t in text[1:-1].split(",") if t.strip())
    return text


def encoder_spec_from_dict(values: dict) -> EncoderSpec:
    fields = {k: _parse_value(str(v)) for k, v in values.items()}
    for name in ("sparsity_factor", "dropout"):
        if name in fields:
            fields[name] = float(fields[name])
    return EncoderSpec(**fields)


def save_model(model: ForecastModel, path) -> None:
    save_state(model.state_dict(), model.describe(), path)


def load_model(path) -> ForecastModel:
    state, spec = load_state(path)
    enc_spec = encoder_spec_from_dict({k[len("encoder."):]: v for k, v in spec.items()
                                       if k.startswith("encoder.")})
    horizon, lookback = int(spec["horizon"]), int(spec["lookback"])
    encoder = build_encoder(enc_spec, 0)
    if spec["head"] == "ridge":
        head = RidgeHead(readout_dim(enc_spec, horizon, spec["readout"]), horizon * enc_spec.input_dim)
        head.alpha = float(spec.get("head.alpha", "nan"))
    else:
        head = MLPHead(readout_dim(enc_spec, horizon, spec["readout"]), int(spec["head.hidden"]),
                       horizon * enc_spec.input_dim)
    model = ForecastModel(encoder, head, horizon, lookback, spec["readout"])
    model.load_state_dict(state)
    return model


def save_encoder(encoder: Encoder, path) -> None:
    save_state(encoder.state_dict(), encoder.spec.to_dict(), path)


def load_encoder(path, expected: EncoderSpec | None = None) -> Encoder:
    state, spec = load_state(path)
    enc_spec = encoder_spec_from_dict(spec)
    if expected is not None and enc_spec != expected:
        raise CheckpointMismatch(f"checkpoint spec {enc_spec} differs from requested {expected}")
    encoder = build_encoder(enc_spec, 0)
    encoder.load_state_dict(state)
    return encoder


# ---------------------------------------------------------------- reports
@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mse: float = float("inf")
    status: str = "converged"
    optimizer_steps: int = 0
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def write_epochs_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, ["epoch", "train_mse", "train_sscl", "val_mse", "lr"])
            writer.writeheader()
            for row in self.epochs:
                writer.writerow({k: row[k] for k in writer.fieldnames})


class _DivergenceGuard:
    def __init__(self, factor, patience):
        self.factor, self.patience = factor, patience
        self.initial, self.run = None, 0

    def check(self, value: float) -> bool:
        """True when training should abort."""
        if not math.isfinite(value):
            return True
        if self.initial is None:
            self.initial = abs(value)
            return False
        self.run = self.run + 1 if abs(value) > self.factor * self.initial else 0
        return self.run >= self.patience


def _batches(n_windows, batch_size, rng, max_steps):
    order = rng.permutation(n_windows)
    steps = math.ceil(n_windows / batch_size)
    if max_steps:
        steps = min(steps, max_steps)
    for i in range(steps):
        yield order[i * batch_size:(i + 1) * batch_size]


def _tensor(values, device, dtype=torch.float32):
    return torch.as_tensor(values, dtype=dtype, device=device)


def fit_supervised(model: ForecastModel, params, data: PreparedData, cfg: TrainConfig,
                   sscl: SSCLObjective | None = None, scheduler: str | None = None) -> TrainReport:
    """Minimize mse + lam * sscl over train windows with early stopping on val MSE.

    Only ``params`` are optimized. The model is left holding the weights of the
    best validation epoch.
    """
    scheduler = scheduler or cfg.scheduler
    L, T = model.lookback, model.horizon
    device = torch.device(cfg.device)
    model.to(device)
    train = data.train.values
    starts = window_starts(len(train), L, T)
    rng = np.random.default_rng(cfg.seed)
    steps_per_epoch = math.ceil(len(starts) / cfg.batch_size)
    if cfg.max_steps_per_epoch:
        steps_per_epoch = min(steps_per_epoch, cfg.max_steps_per_epoch)
    total_steps = steps_per_epoch * cfg.epochs
    params = list(params)
    optimizer = torch.optim.Adam(params, lr=cfg.peak_lr, betas=cfg.betas, eps=cfg.eps,
                                 weight_decay=cfg.weight_decay)
    lam = cfg.lam if sscl is not None else 0.0
    guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
    report = TrainReport()
    best_state = copy.deepcopy(model.state_dict())
    bad_epochs, step, t0 = 0, 0, time.perf_counter()
    frozen_encoder = not any(p.requires_grad for p in model.encoder.parameters())

    for epoch in range(cfg.epochs):
        model.train()
        if frozen_encoder:
            model.encoder.eval()
        sums = np.zeros(2)
        n_batches = 0
        lr = cfg.peak_lr
        diverged = False
        for idx in _batches(len(starts), cfg.batch_size, rng, cfg.max_steps_per_epoch):
            batch = gather_windows(train, starts[idx], L, T)
            x, y = _tensor(batch.inputs, device), _tensor(batch.targets, device)
            lr = learning_rate(step, total_steps, cfg, scheduler)
            for group in optimizer.param_groups:
                group["lr"] = lr
            mse = mse_loss(model(x), y)
            aux = sscl(x) if sscl is not None else mse.new_zeros(())
            total = combined_loss(mse, aux, lam)
            if guard.check(float(total.detach())):
                diverged = True
                break
            optimizer.zero_grad(set_to_none=True)
            total.backward()
            optimizer.step()
            step += 1
            report.steps.append({"step": step, "mse": mse.item(), "sscl": aux.item(),
                                 "total": total.item(), "lr": lr})
            sums += (mse.item(), aux.item())
            n_batches += 1
        if diverged:
            report.status = "diverged"
            log.warning("training diverged at step %d; restoring best checkpoint", step)
            break
        val = evaluate_model(model, data.val, L, T, max_windows=cfg.max_val_windows,
                             device=device)["mse"]
        report.epochs.append({"epoch": epoch, "train_mse": sums[0] / max(n_batches, 1),
                              "train_sscl": sums[1] / max(n_batches, 1), "val_mse": val, "lr": lr})
        log.info("epoch %d train_mse %.4f val_mse %.4f", epoch, sums[0] / max(n_batches, 1), val)
        if val < report.best_val_mse:
            report.best_val_mse, report.best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= max(cfg.early_stop_patience, 0) and epoch < cfg.epochs - 1:
                report.status = "early_stopped"
                break
    model.load_state_dict(best_state)
    report.optimizer_steps = step
    report.wall_clock = time.perf_counter() - t0
    return report


def train_end_to_end(spec: EncoderSpec, loss_choice: str, data: PreparedData, cfg: TrainConfig,
                     horizon: int, lookback: int, loss_cfg: LossConfig = LossConfig(),
                     policy: AugmentPolicy = AugmentPolicy(), readout_mode: str = "last_t"):
    """Jointly train encoder + MLP head on MSE plus the lambda-scaled SSCL term."""
    algorithm = sscl_algorithm(loss_choice)
    cfg = copy.copy(cfg)
    cfg.lam = loss_cfg.lam if algorithm is not None else 0.0
    model = build_forecast_model(spec, horizon, lookback, cfg.seed, readout_mode)
    sscl = None
    params = list(model.parameters())
    if algorithm is not None:
        sscl = SSCLObjective(algorithm, model.encoder, loss_cfg, policy, seed=cfg.seed)
        params += sscl.extra_parameters()
    scheduler = "cosine" if uses_cosine(algorithm) else cfg.scheduler
    report = fit_supervised(model, params, data, cfg, sscl, scheduler)
    return model, report


@dataclass
class PretrainReport:
    optimizer_steps: int = 0
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    status: str = "converged"
    wall_clock: float = 0.0
    checkpoint: str | None = None


def pretrain_sscl(spec: EncoderSpec, algorithm: str, data: PreparedData, cfg: TrainConfig,
                  lookback: int, loss_cfg: LossConfig = LossConfig(),
                  policy: AugmentPolicy = AugmentPolicy(), out_dir=None):
    """Run exactly ``cfg.pretrain_iters`` optimizer steps of the SSCL objective alone."""
    if algorithm not in SSCL_ALGORITHMS:
        raise ValueError(f"unknown SSCL algorithm {algorithm!r}")
    device = torch.device(cfg.device)
    encoder = build_encoder(spec, cfg.seed).to(device)
    report = PretrainReport()
    t0 = time.perf_counter()
    if cfg.pretrain_iters > 0:
        sscl = SSCLObjective(algorithm, encoder, loss_cfg, policy, seed=cfg.seed)
        params = list(encoder.parameters()) + sscl.extra_parameters()
        optimizer = torch.optim.Adam(params, lr=cfg.peak_lr, betas=cfg.betas, eps=cfg.eps,
                                     weight_decay=cfg.weight_decay)
        scheduler = "cosine" if uses_cosine(algorithm) else cfg.scheduler
        train = data.train.values
        starts = window_starts(len(train), lookback, 1)
        rng = np.random.default_rng(cfg.seed)
        guard = _DivergenceGuard(cfg.divergence_factor, cfg.divergence_patience)
        last_good = copy.deepcopy(encoder.state_dict())
        encoder.train()
        batches = iter(())
        while report.optimizer_steps < cfg.pretrain_iters:
            idx = next(batches, None)
            if idx is None:
                batches = _batches(len(starts), cfg.batch_size, rng, 0)
                continue
            x = _tensor(gather_windows(train, starts[idx], lookback, 1).inputs, device)
            lr = learning_rate(report.optimizer_steps, cfg.pretrain_iters, cfg, scheduler)
            for group in optimizer.param_groups:
                group["lr"] = lr
            loss = sscl(x)
            if guard.check(float(loss.detach())):
                report.status = "diverged"
                encoder.load_state_dict(last_good)
                break
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            report.optimizer_steps += 1
            report.losses.append(loss.item())
            report.lrs.append(lr)
            if report.optimizer_steps % 50 == 0:
                last_good = copy.deepcopy(encoder.state_dict())
        encoder.eval()
    report.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        save_encoder(encoder, out_dir)
        report.checkpoint = os.fspath(out_dir)
    return encoder, report


def _freeze(encoder: nn.Module) -> None:
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)


@torch.no_grad()
def extract_features(model: ForecastModel, series, stride: int = 1, max_windows: int = 0,
                     batch_size: int = 256, device="cpu"):
    """Readout features Z and flattened targets Y (float64) for every window."""
    starts = window_starts(len(series.values), model.lookback, model.horizon, stride)
    if max_windows and len(starts) > max_windows:
        starts = starts[np.linspace(0, len(starts) - 1, max_windows).round().astype(int)]
    zs, ys = [], []
    for i in range(0, len(starts), batch_size):
        batch = gather_windows(series.values, starts[i:i + batch_size], model.lookback, model.horizon)
        zs.append(model.features(_tensor(batch.inputs, device)).double().cpu())
        ys.append(torch.as_tensor(batch.targets, dtype=torch.float64).reshape(len(batch.targets), -1))
    return torch.cat(zs), torch.cat(ys)


def ridge_solve(Z, Y, alpha: float):
    """W = (Z^T Z + alpha I)^-1 Z^T Y, using the dual form when features outnumber rows."""
    Z = torch.as_tensor(Z, dtype=torch.float64)
    Y = torch.as_tensor(Y, dtype=torch.float64)
    n, f = Z.shape
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    if alpha == 0 and (f > n or int(torch.linalg.matrix_rank(Z)) < f):
        raise SingularSystem("Z^T Z is rank-deficient and alpha = 0")
    if f <= n:
        gram = Z.T @ Z + alpha * torch.eye(f, dtype=Z.dtype)
        return torch.linalg.solve(gram, Z.T @ Y)
    gram = Z @ Z.T + alpha * torch.eye(n, dtype=Z.dtype)
    return Z.T @ torch.linalg.solve(gram, Y)


def fit_frozen_ridge(encoder: Encoder, data: PreparedData, horizon: int, lookback: int,
                     alphas=(0.01, 0.1, 1.0, 10.0), readout_mode: str = "last_t",
                     fit_intercept: bool = True, max_windows: int = 0, device="cpu") -> ForecastModel:
    """Closed-form ridge head on frozen features; alpha picked by validation MSE."""
    _freeze(encoder)
    in_dim = readout_dim(encoder.spec, horizon, readout_mode)
    head = RidgeHead(in_dim, horizon * encoder.spec.input_dim)
    model = ForecastModel(encoder, head, horizon, lookback, readout_mode).to(device)
    Z, Y = extract_features(model, data.train, max_windows=max_windows, device=device)
    Zv, Yv = extract_features(model, data.val, max_windows=max_windows, device=device)
    z_mean = Z.mean(0) if fit_intercept else torch.zeros(Z.shape[1], dtype=Z.dtype)
    y_mean = Y.mean(0) if fit_intercept else torch.zeros(Y.shape[1], dtype=Y.dtype)
    best = None
    for alpha in alphas:
        W = ridge_solve(Z - z_mean, Y - y_mean, alpha)
        b = y_mean - z_mean @ W
        val = float(((Zv @ W + b - Yv) ** 2).mean())
        if best is None or val < best[0]:
            best = (val, alpha, W, b)
    _, head.alpha, W, b = best
    head.weight.copy_(W.to(head.weight.dtype))
    head.bias.copy_(b.to(head.bias.dtype))
    return model


def train_frozen_mlp(encoder: Encoder, data: PreparedData, cfg: TrainConfig, horizon: int,
                     lookback: int, readout_mode: str = "last_t", head_hidden: int | None = None):
    """Train only a fresh MLP head on top of a frozen encoder."""
    _freeze(encoder)
    model = build_forecast_model(encoder.spec, horizon, lookback, cfg.seed, readout_mode,
                                 encoder=encoder, head_hidden=head_hidden)
    report = fit_supervised(model, model.head.parameters(), data, cfg)
    return model, report


def finetune(encoder: Encoder | str | os.PathLike, data: PreparedData, cfg: TrainConfig,
             horizon: int, lookback: int, expected_spec: EncoderSpec | None = None,
             readout_mode: str = "last_t"):
    """Fresh MLP head + pretrained encoder, trained jointly on MSE only."""
    if isinstance(encoder, (str, os.PathLike)):
        encoder = load_encoder(encoder, expected_spec)
    elif expected_spec is not None and encoder.spec != expected_spec:
        raise CheckpointMismatch(f"encoder spec {encoder.spec} differs from {expected_spec}")
    encoder = copy.deepcopy(encoder)
    for p in encoder.parameters():
        p.requires_grad_(True)
    model = build_forecast_model(encoder.spec, horizon, lookback, cfg.seed, readout_mode,
                                 encoder=encoder)
    report = fit_supervised(model, model.parameters(), data, cfg)
    return model, report


def encoder_checksum(encoder: nn.Module) -> str:
    return state_checksum(encoder)
