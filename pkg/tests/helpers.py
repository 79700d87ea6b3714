"""Finite-difference oracle and small builders shared by the tests."""
import numpy as np
import torch

from tscl.backbone import EncoderSpec


def central_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Numerical gradient of scalar ``fn`` at ``x`` by central differences (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        _fill(fn, x, flat, gflat, eps)
    return grad


def _fill(fn, x, flat, gflat, eps):
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + eps
        up = float(fn(x))
        flat[i] = old - eps
        down = float(fn(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * eps)


def analytic_grad(fn, x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    (g,) = torch.autograd.grad(fn(x), x)
    return g


def rel_error(a, b) -> float:
    a, b = torch.as_tensor(a, dtype=torch.float64), torch.as_tensor(b, dtype=torch.float64)
    return float((a - b).norm() / max(float(b.norm()), float(a.norm()), 1e-12))


def param_fd_check(loss_fn, param: torch.nn.Parameter, n: int = 6, eps: float = 1e-6) -> float:
    """Relative error between autograd and central differences on ``n`` entries of ``param``."""
    param.grad = None
    loss_fn().backward()
    analytic = param.grad.detach().view(-1).clone()
    idx = torch.linspace(0, param.numel() - 1, min(n, param.numel())).long()
    numeric = torch.zeros(len(idx), dtype=torch.float64)
    with torch.no_grad():
        flat = param.view(-1)
        for j, i in enumerate(idx):
            old = flat[i].item()
            flat[i] = old + eps
            up = float(loss_fn())
            flat[i] = old - eps
            down = float(loss_fn())
            flat[i] = old
            numeric[j] = (up - down) / (2 * eps)
    return rel_error(analytic[idx], numeric)


def tiny_spec(kind: str, m: int = 2, d: int = 8, **kw) -> EncoderSpec:
    base = {"LSTM": dict(num_layers=2, width=8),
            "TCN": dict(num_layers=2, width=8, kernel_size=3),
            "Transformer": dict(num_layers=1, width=8, num_heads=2, ff_dim=16, attention="full")}[kind]
    base.update(kw)
    return EncoderSpec.default(kind, m, hidden_dim=d, **base)


def sine_series(n=500, m=1, period=24, noise=0.05, seed=0):
    from tscl.data import RawSeries
    import pandas as pd

    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=np.float64)
    values = np.sin(2 * np.pi * t[:, None] / period + np.arange(m)) + noise * rng.standard_normal((n, m))
    stamps = pd.date_range("2020-01-01", periods=n, freq="h").to_numpy()
    return RawSeries(stamps, values, [f"x{i}" for i in range(m)], {"source": "sine"})
