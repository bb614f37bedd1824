"""Displacement metrics, benchmark tables and error histograms.

The scored unit is one vehicle in one evaluation window. Best-of-k metrics
take the minimum over the first k of the same sample set, so k = 1, 3, 5
are nested.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .dataset import TrajectoryWindow
from .models import Batch, CorrectionParams, GeneratorParams, predict_k, stack_windows

MISS_THRESHOLD = 2.0
METRICS = ("minADE", "minFDE", "Miss Rate")


class LengthMismatch(ValueError):
    pass


class MissingSplit(FileNotFoundError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


class Task(str, Enum):
    AllVehicles = "AllVehicles"
    EgoOnly = "EgoOnly"


def _check(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[0] < 1:
        raise LengthMismatch(f"prediction shape {pred.shape} vs ground truth {gt.shape}")


def ade(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check(pred, gt)
    return float(np.mean(np.linalg.norm(pred - gt, axis=-1)))


def fde(pred, gt) -> float:
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    _check(pred, gt)
    return float(np.linalg.norm(pred[-1] - gt[-1]))


def min_over_k(metric: Callable, preds, gt) -> float:
    preds = list(preds)
    if not preds:
        raise ValueError("need at least one sample")
    return min(metric(p, gt) for p in preds)


def miss_rate(preds_per_window: Sequence, gts: Sequence, threshold: float = MISS_THRESHOLD,
              per_sample: bool = False) -> float:
    """Fraction of units whose best-of-k FDE strictly exceeds ``threshold``.

    With ``per_sample`` every sample counts separately instead.
    """
    if len(preds_per_window) != len(gts):
        raise ValueError("predictions and ground truths are not aligned")
    misses, total = 0, 0
    for preds, gt in zip(preds_per_window, gts):
        errs = [fde(p, gt) for p in preds]
        if per_sample:
            misses += sum(e > threshold for e in errs)
            total += len(errs)
        else:
            misses += min(errs) > threshold
            total += 1
    return misses / total if total else 0.0


# vectorized forms used by the benchmark; tests pin them to the scalar ones

def displacement(preds: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Per-step distances, shape k x N x T, for preds k x N x T x 2 and gt N x T x 2."""
    return np.linalg.norm(preds - gt[None], axis=-1)


def unit_errors(preds: np.ndarray, gt: np.ndarray, k: int, horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Best-of-first-k ADE and FDE per unit over the first ``horizon`` steps."""
    d = displacement(preds[:k, :, :horizon], gt[:, :horizon])
    return d.mean(axis=-1).min(axis=0), d[..., -1].min(axis=0)


@dataclass
class MetricTable:
    columns: list[str]
    rows: dict[str, list[float]]

    def to_dict(self) -> dict:
        return {"columns": self.columns, "rows": self.rows}


def _metric_rows(preds, gt, k, horizon, threshold=MISS_THRESHOLD, per_sample=False) -> dict[str, float]:
    a, f = unit_errors(preds, gt, k, horizon)
    if per_sample:
        miss = float(np.mean(displacement(preds[:k, :, :horizon], gt[:, :horizon])[..., -1] > threshold))
    else:
        miss = float(np.mean(f > threshold))
    return {"minADE": float(a.mean()), "minFDE": float(f.mean()), "Miss Rate": miss}


def _table(columns: list[str], cells: list[dict[str, float]], average: str | None) -> MetricTable:
    rows = {m: [c[m] for c in cells] for m in METRICS}
    cols = list(columns)
    if average:
        cols.append(average)
        for m in METRICS:
            rows[m].append(float(np.mean(rows[m])))
    return MetricTable(cols, rows)


@dataclass
class MetricReport:
    model: str
    task: Task
    split: str
    ks: tuple[int, ...]
    horizons: tuple[int, ...]
    topk: MetricTable
    per_horizon: MetricTable
    per_map: MetricTable | None
    windows: int
    units: int
    seed: int
    ade_samples: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))
    fde_samples: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        return {
            "model": self.model, "task": self.task.value, "split": self.split, "ks": list(self.ks),
            "horizons": list(self.horizons), "windows": self.windows, "units": self.units, "seed": self.seed,
            "topk": self.topk.to_dict(), "per_horizon": self.per_horizon.to_dict(),
            "per_map": self.per_map.to_dict() if self.per_map else None,
            "fde_p95": percentile(self.fde_samples) if self.fde_samples.size else None,
        }


class Predictor(Protocol):
    tag: str

    def predict(self, batch: Batch, k: int, seed: int, horizon: int) -> np.ndarray: ...


@dataclass
class GanPredictor:
    generator: GeneratorParams
    correction: CorrectionParams | None = None
    tag: str = "TGAN"

    def predict(self, batch: Batch, k: int, seed: int, horizon: int) -> np.ndarray:
        if self.correction is not None and batch.S is None:
            raise ValueError("InfraGAN needs encoded context features")
        return predict_k(self.generator, self.correction, batch.X, batch.S, k=k, seed=seed,
                         horizon=horizon).trajectories


@dataclass
class OraclePredictor:
    """Returns the ground truth; used to check the evaluation plumbing."""

    tag: str = "Oracle"

    def predict(self, batch: Batch, k: int, seed: int, horizon: int) -> np.ndarray:
        return np.repeat(batch.Y[None, :, :horizon], k, axis=0)


def benchmark(model: Predictor, windows: Sequence[TrajectoryWindow], task: Task = Task.AllVehicles,
              ks: Sequence[int] = (1, 3, 5), horizons: Sequence[int] = (5, 6, 8), per_map: bool = True,
              seed: int = 0, split: str = "test", threshold: float = MISS_THRESHOLD,
              missrate_per_sample: bool = False) -> MetricReport:
    """Evaluate ``model`` on ``windows`` in the top-k, per-horizon and per-map layouts.

    Observation is always the full 8 steps; shorter horizons score the
    first steps of the same predictions. Per-map and per-horizon tables use
    the largest k.
    """
    if not windows:
        raise MissingSplit(f"split {split!r} has no evaluation windows")
    task = Task(task)
    ks = tuple(sorted(ks))
    horizons = tuple(sorted(horizons))
    batch = stack_windows(windows)
    T = batch.Y.shape[1]
    if horizons[-1] > T:
        raise ValueError(f"horizon {horizons[-1]} exceeds the {T} ground-truth steps")
    preds = np.asarray(model.predict(batch, ks[-1], seed, T))
    gt = batch.Y
    sel = batch.ego if task is Task.EgoOnly else np.ones(len(gt), dtype=bool)
    preds, gt = preds[:, sel], gt[sel]
    maps = np.array([batch.map_id[i] for i in batch.window])[sel]
    kmax = ks[-1]

    def cell(p, g, k, h):
        return _metric_rows(p, g, k, h, threshold, missrate_per_sample)

    topk = _table([f"k={k}" for k in ks], [cell(preds, gt, k, T) for k in ks], "Average")
    by_h = _table([f"{h} steps" for h in horizons], [cell(preds, gt, kmax, h) for h in horizons], "Average")
    table_map = None
    if per_map:
        names = sorted(set(maps.tolist()))
        cells = [cell(preds[:, maps == m], gt[maps == m], kmax, T) for m in names]
        cells.append(cell(preds, gt, kmax, T))
        table_map = _table(names + ["Overall"], cells, None)
    d = displacement(preds, gt)
    return MetricReport(
        model=model.tag, task=task, split=split, ks=ks, horizons=horizons, topk=topk, per_horizon=by_h,
        per_map=table_map, windows=len(windows), units=int(sel.sum()), seed=seed,
        ade_samples=d.mean(axis=-1).ravel(), fde_samples=d[..., -1].ravel(),
    )


TABLE_TITLES = {
    6: "TRAJECTORY PREDICTION BENCHMARKS USING TOP k PREDICTIONS",
    7: "COMPARISON OF BENCHMARK MODELS PER MAP FOR THE TRAJECTORY PREDICTION TASK",
    8: "COMPARISON OF BENCHMARK MODELS OVER PREDICTION HORIZONS",
    9: "EGO TRAJECTORY PREDICTION BENCHMARKS USING TOP k PREDICTIONS",
}

SECTION_LABELS = {
    "TGAN": "Without Infrastructure and Pooled Vehicle Information (TGAN)",
    "InfraGAN": "With Infrastructure and Pooled Vehicle Information (InfraGAN)",
}


def _pick(report: MetricReport, table: int) -> MetricTable:
    if table in (6, 9):
        return report.topk
    if table == 8:
        return report.per_horizon
    if table == 7:
        if report.per_map is None:
            raise ValueError("report was computed without per-map rows")
        return report.per_map
    raise ValueError(f"unknown table {table}")


def render_table(table: int, reports: Sequence[MetricReport]) -> str:
    """Plain-text table in the benchmark layout, one section per model."""
    if table == 9 and any(r.task is not Task.EgoOnly for r in reports):
        raise ValueError("table 9 needs EgoOnly reports")
    first = _pick(reports[0], table)
    lines = [f"TABLE {table}", TABLE_TITLES[table], "", "\t".join(["Metric"] + first.columns)]
    for r in reports:
        t = _pick(r, table)
        lines.append(SECTION_LABELS.get(r.model, r.model))
        for m in METRICS:
            lines.append("\t".join([m] + [f"{v:.2f}" for v in t.rows[m]]))
    return "\n".join(lines) + "\n"


@dataclass
class HistogramData:
    edges: np.ndarray
    counts: list[np.ndarray]
    labels: list[str]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi"] + self.labels)
        for i in range(len(self.edges) - 1):
            w.writerow([repr(float(self.edges[i])), repr(float(self.edges[i + 1]))] + [int(c[i]) for c in self.counts])
        return buf.getvalue()


def error_histogram(values: Sequence[np.ndarray] | np.ndarray, bins: int = 30, labels: Sequence[str] | None = None,
                    path: str | Path | None = None, title: str = "") -> HistogramData:
    """Histogram one or more error series over shared bins.

    With ``path`` the plot is written there (format from the suffix) and the
    bin counts next to it as CSV.
    """
    series = [np.asarray(values, dtype=np.float64)] if np.ndim(values[0]) == 0 else \
        [np.asarray(v, dtype=np.float64) for v in values]
    if any(s.size == 0 for s in series):
        raise ValueError("histogram needs at least one value per series")
    if labels is None:
        labels = ["Before", "After"][: len(series)] if len(series) == 2 else [f"series{i}" for i in range(len(series))]
    edges = np.histogram_bin_edges(np.concatenate(series), bins=bins)
    counts = [np.histogram(s, bins=edges)[0] for s in series]
    data = HistogramData(edges, counts, list(labels))
    if path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        fig, ax = plt.subplots(figsize=(6, 4))
        for s, lab in zip(series, labels):
            ax.hist(s, bins=edges, alpha=0.5, label=lab)
        ax.set_xlabel("error (m)")
        ax.set_ylabel("count")
        if title:
            ax.set_title(title)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else None)
        plt.close(fig)
        path.with_suffix(".csv").write_text(data.to_csv())
    return data


def percentile(values: np.ndarray, q: float = 95.0) -> float:
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def report_json(reports: Sequence[MetricReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
