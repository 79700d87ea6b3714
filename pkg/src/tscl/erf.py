"""Empirical receptive field: input gradients of a single-step squared error."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import torch

from .errors import NonDifferentiableHead, ShapeMismatch


@dataclass
class ErfMap:
    grads: np.ndarray  # (L, m)
    target_step: int

    @property
    def magnitude(self) -> np.ndarray:
        return np.linalg.norm(self.grads, axis=1)

    def normalized(self) -> np.ndarray:
        mag = self.magnitude
        total = mag.sum()
        return mag / total if total > 0 else np.zeros_like(mag)


def erf_gradient(model, window, gold, target_step: int) -> ErfMap:
    """Gradient of sum_features (y_j - yhat_j)^2 with respect to every input entry.

    Runs in the model's own dtype; the model is put in eval mode.
    """
    dtype = next(model.parameters()).dtype
    x = torch.as_tensor(np.asarray(window), dtype=dtype).clone().unsqueeze(0).requires_grad_(True)
    y = torch.as_tensor(np.asarray(gold), dtype=dtype)
    if x.dim() != 3 or y.dim() != 2:
        raise ShapeMismatch("window must be (L, m) and gold (T, m)")
    if not 0 <= target_step < y.shape[0]:
        raise ValueError(f"target_step {target_step} outside [0, {y.shape[0]})")
    was_training = model.training
    model.eval()
    with torch.enable_grad():
        pred = model(x)[0, target_step]
        loss = ((y[target_step] - pred) ** 2).sum()
        if not loss.requires_grad:
            model.train(was_training)
            return ErfMap(np.zeros(tuple(x.shape[1:])), target_step)
        (grad,) = torch.autograd.grad(loss, x, allow_unused=True)
    model.train(was_training)
    if grad is None:
        raise NonDifferentiableHead("forecast does not depend differentiably on the input")
    return ErfMap(grad[0].detach().cpu().double().numpy(), target_step)


def dominant_period(window, min_lag: int = 2) -> int | None:
    """Shortest lag whose autocorrelation peak is within 10% of the strongest peak.

    Features are centered and their autocorrelations pooled. Lags up to L/2
    are considered; returns None when none of them is a local maximum.
    """
    x = np.asarray(window, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    x = x - x.mean(axis=0)
    L = len(x)
    var = (x * x).sum() / L
    if var == 0 or L < min_lag + 2:
        return None
    # mean over the overlapping pairs, so long lags are not shrunk towards zero
    acf = np.array([(x[: L - k] * x[k:]).sum() / ((L - k) * var) for k in range(L)])
    peaks = [k for k in range(max(min_lag, 1), min(L // 2, L - 2) + 1)
             if acf[k] >= acf[k - 1] and acf[k] >= acf[k + 1]]
    if not peaks:
        return None
    top = max(acf[k] for k in peaks)
    # multiples of the period score about as high as the period itself; keep the shortest
    return next(k for k in peaks if acf[k] >= 0.9 * top)


def period_lags(lookback: int, target_step: int, period: int) -> list[int]:
    """Lags (target position minus input position) that are multiples of ``period``."""
    lo, hi = target_step + 1, lookback + target_step
    return [k for k in range(period, hi + 1, period) if k >= lo]


def attribution_entropy(weights) -> float:
    w = np.asarray(weights, dtype=np.float64)
    w = w[w > 0]
    return float(-(w * np.log(w)).sum())


@dataclass
class ErfStats:
    entropy: float
    period_mass: float
    period: int | None


def erf_stats(erf_map: ErfMap, window, period: int | None = None) -> ErfStats:
    weights = erf_map.normalized()
    L = len(weights)
    period = dominant_period(window) if period is None else period
    mass = 0.0
    if period:
        idx = [L + erf_map.target_step - k for k in period_lags(L, erf_map.target_step, period)]
        mass = float(weights[idx].sum())
    return ErfStats(attribution_entropy(weights), mass, period)


@dataclass
class ErfComparison:
    map_a: ErfMap
    map_b: ErfMap
    stats_a: ErfStats
    stats_b: ErfStats


def erf_compare(model_a, model_b, window, gold, target_step: int, period: int | None = None):
    map_a = erf_gradient(model_a, window, gold, target_step)
    map_b = erf_gradient(model_b, window, gold, target_step)
    if period is None:
        period = dominant_period(window)
    return ErfComparison(map_a, map_b, erf_stats(map_a, window, period),
                         erf_stats(map_b, window, period))


def erf_filename(model_name: str, window_index: int, target_step: int, ext: str) -> str:
    return f"erf_{model_name}_{window_index}_{target_step}.{ext}"


def emit_heatmap(erf_map: ErfMap, out_dir, model_name: str = "model", window_index: int = 0,
                 window=None, vmax=None) -> list[str]:
    """Write the raw gradient CSV and a rendered heatmap; append both to the manifest."""
    from .plotting import erf_heatmap

    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, erf_filename(model_name, window_index, erf_map.target_step, "csv"))
    png_path = os.path.join(out_dir, erf_filename(model_name, window_index, erf_map.target_step, "png"))
    np.savetxt(csv_path, erf_map.grads, delimiter=",", fmt="%.17g")
    erf_heatmap(erf_map.grads, erf_map.magnitude, png_path, vmax=vmax, window=window,
                title=f"{model_name}: window {window_index}, step {erf_map.target_step}")
    with open(os.path.join(out_dir, "manifest.txt"), "a") as fh:
        fh.write(os.path.basename(csv_path) + "\n" + os.path.basename(png_path) + "\n")
    return [csv_path, png_path]


def read_grads_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
