"""Forecasting, MSE/MAE metrics and the dataset x horizon results tables."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import gather_windows, window_starts
from .errors import MissingCell, ShapeMismatch

HORIZONS = {
    "ECL": (24, 48, 168, 336, 720),
    "ETTh1": (24, 48, 168, 336, 720),
    "ETTm1": (24, 48, 96, 288, 672),
}


@torch.no_grad()
def forecast(model, inputs):
    """(B, L, m) -> (B, T, m) with the model in eval mode."""
    was_training = model.training
    model.eval()
    x = torch.as_tensor(inputs, dtype=next(model.parameters()).dtype)
    if x.dim() != 3 or x.shape[-1] != model.output_dim:
        raise ShapeMismatch(f"expected (B, L, {model.output_dim}) inputs, got {tuple(x.shape)}")
    out = model(x)
    model.train(was_training)
    return out


class MetricAccumulator:
    """Streaming squared/absolute error sums in float64."""

    def __init__(self):
        self.sq = 0.0
        self.abs = 0.0
        self.count = 0

    def update(self, pred, gold):
        pred = np.asarray(pred, dtype=np.float64)
        gold = np.asarray(gold, dtype=np.float64)
        if pred.shape != gold.shape:
            raise ShapeMismatch(f"pred {pred.shape} vs gold {gold.shape}")
        diff = pred - gold
        self.sq += float(np.sum(diff * diff))
        self.abs += float(np.sum(np.abs(diff)))
        self.count += diff.size

    def result(self) -> dict:
        if self.count == 0:
            return {"mse": float("nan"), "mae": float("nan")}
        return {"mse": self.sq / self.count, "mae": self.abs / self.count}


def mse_mae(pred, gold) -> dict:
    acc = MetricAccumulator()
    acc.update(pred, gold)
    return acc.result()


def evaluate_model(model, series, lookback: int, horizon: int, stride: int = 1,
                   batch_size: int = 256, max_windows: int = 0, normalizer=None,
                   raw_scale: bool = False, device="cpu") -> dict:
    """MSE/MAE over all windows of ``series`` (evenly thinned to ``max_windows``).

    With ``raw_scale`` both predictions and targets are mapped back through
    ``normalizer`` before scoring.
    """
    values = series.values if hasattr(series, "values") else np.asarray(series)
    starts = window_starts(len(values), lookback, horizon, stride)
    if max_windows and len(starts) > max_windows:
        starts = starts[np.linspace(0, len(starts) - 1, max_windows).round().astype(int)]
    acc = MetricAccumulator()
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for i in range(0, len(starts), batch_size):
            batch = gather_windows(values, starts[i:i + batch_size], lookback, horizon)
            x = torch.as_tensor(batch.inputs, dtype=dtype, device=device)
            pred = model(x).cpu().double().numpy()
            gold = batch.targets
            if raw_scale:
                pred, gold = normalizer.invert(pred), normalizer.invert(gold)
            acc.update(pred, gold)
    model.train(was_training)
    return acc.result()


@dataclass
class MetricsReport:
    entries: dict = field(default_factory=dict)  # (dataset, horizon) -> {"mse", "mae"}

    @property
    def averages(self) -> dict:
        if not self.entries:
            return {"mse": float("nan"), "mae": float("nan")}
        cells = list(self.entries.values())
        return {k: float(np.mean([c[k] for c in cells])) for k in ("mse", "mae")}


def evaluate_matrix(models: dict, data: dict, horizons: dict | None = None,
                    lookbacks: dict | None = None, **kwargs) -> MetricsReport:
    """Score one model per (dataset, horizon) on that dataset's test split.

    ``data`` maps dataset name -> PreparedData; ``horizons`` defaults to the
    standard horizon lists for each dataset.
    """
    horizons = horizons or {name: HORIZONS[name] for name in data}
    absent = [(name, h) for name, hs in horizons.items() for h in hs if (name, h) not in models]
    if absent:
        raise MissingCell("no model for " + ", ".join(f"({n}, {h})" for n, h in absent))
    report = MetricsReport()
    for name, hs in horizons.items():
        for h in hs:
            model = models[(name, h)]
            lookback = (lookbacks or {}).get((name, h), model.lookback)
            report.entries[(name, h)] = evaluate_model(model, data[name].test, lookback, h, **kwargs)
    return report


class ResultsTable:
    """Cells keyed by (dataset, horizon, method). Wide layout:
    one row per dataset x horizon, an MSE/MAE column pair per method and a final
    average row. Missing cells render as blanks and are excluded from averages."""

    def __init__(self, methods=None):
        self.cells: dict = {}
        self.methods: list[str] = list(methods or [])

    def add(self, dataset, horizon, method, mse, mae, n_seeds=1):
        self.cells[(dataset, int(horizon), method)] = {"mse": mse, "mae": mae, "n": n_seeds}
        if method not in self.methods:
            self.methods.append(method)

    def rows(self):
        seen = []
        for dataset, horizon, _ in self.cells:
            if (dataset, horizon) not in seen:
                seen.append((dataset, horizon))
        return seen

    def missing(self):
        return [(d, h, m) for d, h in self.rows() for m in self.methods if (d, h, m) not in self.cells]

    def average(self, method) -> dict:
        cells = [c for (d, h, m), c in self.cells.items() if m == method]
        if not cells:
            return {"mse": float("nan"), "mae": float("nan")}
        return {k: float(np.mean([c[k] for c in cells])) for k in ("mse", "mae")}

    def report(self, method) -> MetricsReport:
        return MetricsReport({(d, h): {"mse": c["mse"], "mae": c["mae"]}
                              for (d, h, m), c in self.cells.items() if m == method})

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        header = ["dataset", "horizon"]
        for m in self.methods:
            header += [f"{m} MSE", f"{m} MAE"]
        writer.writerow(header)
        for dataset, horizon in self.rows():
            row = [dataset, horizon]
            for m in self.methods:
                cell = self.cells.get((dataset, horizon, m))
                row += ["", ""] if cell is None else [f"{cell['mse']:.6f}", f"{cell['mae']:.6f}"]
            writer.writerow(row)
        avg = ["Average", ""]
        for m in self.methods:
            a = self.average(m)
            avg += [f"{a['mse']:.6f}", f"{a['mae']:.6f}"]
        writer.writerow(avg)
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", newline="") as fh:
                fh.write(text)
        return text

    def render(self) -> str:
        """Fixed-width text rendering with three decimals."""
        col = max([12] + [len(m) + 2 for m in self.methods])
        lines = [f"{'':<10}{'':>6}" + "".join(f"{m:^{col * 2}}" for m in self.methods),
                 f"{'':<10}{'':>6}" + "".join(f"{'MSE':>{col}}{'MAE':>{col}}" for _ in self.methods)]
        last = None
        for dataset, horizon in self.rows():
            label = dataset if dataset != last else ""
            last = dataset
            line = f"{label:<10}{horizon:>6}"
            for m in self.methods:
                cell = self.cells.get((dataset, horizon, m))
                line += (f"{'-':>{col}}{'-':>{col}}" if cell is None
                         else f"{cell['mse']:>{col}.3f}{cell['mae']:>{col}.3f}")
            lines.append(line)
        line = f"{'Average':<10}{'':>6}"
        for m in self.methods:
            a = self.average(m)
            line += f"{a['mse']:>{col}.3f}{a['mae']:>{col}.3f}"
        lines.append(line)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, path) -> "ResultsTable":
        table = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            methods = [h[:-4] for h in header[2::2]]
            table.methods = methods
            for row in reader:
                if row[0] == "Average":
                    continue
                for i, m in enumerate(methods):
                    mse, mae = row[2 + 2 * i], row[3 + 2 * i]
                    if mse:
                        table.add(row[0], int(row[1]), m, float(mse), float(mae))
        return table
