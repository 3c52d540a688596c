"""Accuracy, confusion matrices and SNR / compression-rate sweeps."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

METHODS = ("DASEIN", "DASEIN-S1", "Test-d")


def accuracy(preds, truth) -> float:
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {truth.shape}")
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(preds == truth))


def confusion_matrix(preds, truth, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError("length mismatch")
    if preds.size and (max(preds.max(), truth.max()) >= num_classes or min(preds.min(), truth.min()) < 0):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


@dataclass
class SweepPoint:
    axis: float
    method: str
    seed: int
    accuracy: float


@dataclass
class SweepResult:
    """Raw per-seed accuracies along one sweep axis."""

    name: str
    axis_label: str
    points: list[SweepPoint] = field(default_factory=list)

    def axis(self) -> list[float]:
        return sorted({p.axis for p in self.points})

    def methods(self) -> list[str]:
        return sorted({p.method for p in self.points})

    def summary(self) -> dict[str, list[tuple[float, float, float]]]:
        """Per method: ``(axis, mean, sample std)`` in increasing axis order."""
        out = {}
        for m in self.methods():
            rows = []
            for a in self.axis():
                accs = [p.accuracy for p in self.points if p.method == m and p.axis == a]
                if not accs:
                    continue
                std = float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0
                rows.append((a, float(np.mean(accs)), std))
            out[m] = rows
        return out

    def mean_at(self, method: str, axis_value: float) -> float:
        accs = [p.accuracy for p in self.points if p.method == method and p.axis == axis_value]
        if not accs:
            raise KeyError((method, axis_value))
        return float(np.mean(accs))

    def is_monotone(self, method: str, tolerance: float = 0.0) -> bool:
        """Mean accuracy never drops by more than ``tolerance`` as the axis grows."""
        means = [m for _, m, _ in self.summary()[method]]
        return all(b >= a - tolerance for a, b in zip(means, means[1:]))

    def write_csv(self, directory) -> Path:
        path = Path(directory) / f"sweep_{self.name}.csv"
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["axis", "method", "seed", "accuracy"])
            for p in sorted(self.points, key=lambda p: (p.method, p.axis, p.seed)):
                w.writerow([repr(float(p.axis)), p.method, p.seed, repr(float(p.accuracy))])
        return path

    @classmethod
    def read_csv(cls, path, axis_label: str = "axis") -> "SweepResult":
        path = Path(path)
        name = path.stem.removeprefix("sweep_")
        res = cls(name, axis_label)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                res.points.append(
                    SweepPoint(float(row["axis"]), row["method"], int(row["seed"]), float(row["accuracy"]))
                )
        return res

    def plot(self, path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 3.5))
        for method, rows in self.summary().items():
            xs, means, stds = zip(*rows)
            ax.errorbar(xs, np.asarray(means) * 100, yerr=np.asarray(stds) * 100, marker="o", capsize=3, label=method)
        ax.set_xlabel(self.axis_label)
        ax.set_ylabel("Accuracy (%)")
        ax.grid(alpha=0.3)
        ax.legend()
        fig.tight_layout()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, dpi=120)
        plt.close(fig)
        return path


def write_confusion_csv(cm: np.ndarray, path, class_names: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = list(class_names) if class_names else [str(i) for i in range(len(cm))]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["truth\\pred", *names])
        for name, row in zip(names, cm):
            w.writerow([name, *row.tolist()])
    return path


def plot_confusion(cm: np.ndarray, path, class_names: Sequence[str] | None = None) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    norm = cm / np.maximum(cm.sum(1, keepdims=True), 1)
    ax.imshow(norm, cmap="Blues", vmin=0, vmax=1)
    names = list(class_names) if class_names else [str(i) for i in range(len(cm))]
    ax.set_xticks(range(len(names)), names, rotation=45)
    ax.set_yticks(range(len(names)), names)
    for i in range(len(cm)):
        for j in range(len(cm)):
            ax.text(j, i, f"{norm[i, j]:.2f}", ha="center", va="center", fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


# An evaluator maps (axis value, seed) to {method: accuracy}.
Evaluator = Callable[[float, int], dict]


def _run_grid(evaluator: Evaluator, tasks: list[tuple[float, int]], jobs: int) -> list[dict]:
    if jobs <= 1:
        return [evaluator(a, s) for a, s in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(evaluator, a, s) for a, s in tasks]
        return [f.result() for f in futures]


def run_sweep(
    name: str,
    axis_label: str,
    axis_values: Iterable[float],
    seeds: Iterable[int],
    evaluator: Evaluator,
    jobs: int = 1,
) -> SweepResult:
    """Evaluate every (axis point, seed); aggregation order is fixed."""
    axis_values = [float(a) for a in axis_values]
    if any(b <= a for a, b in zip(axis_values, axis_values[1:])):
        raise ValueError("sweep axis must be strictly increasing")
    tasks = [(a, int(s)) for a in axis_values for s in seeds]
    result = SweepResult(name, axis_label)
    for (a, s), accs in zip(tasks, _run_grid(evaluator, tasks, jobs)):
        for method, acc in accs.items():
            if not 0.0 <= acc <= 1.0:
                raise ValueError(f"accuracy {acc} outside [0, 1]")
            result.points.append(SweepPoint(a, method, s, float(acc)))
    return result


def snr_sweep(evaluator: Evaluator, snr_list: Iterable[float], seeds: Iterable[int], jobs: int = 1) -> SweepResult:
    """Target accuracy against channel SNR (dB).

    ``evaluator(snr_db, seed)`` returns accuracies keyed by method tag.
    """
    return run_sweep("snr", "SNR (dB)", snr_list, seeds, evaluator, jobs)


def cr_sweep(evaluator: Evaluator, cr_list: Iterable[float], seeds: Iterable[int], jobs: int = 1) -> SweepResult:
    """Like :func:`snr_sweep`, but the evaluator retrains at each compression rate."""
    return run_sweep("cr", "compression rate", cr_list, seeds, evaluator, jobs)


def snr_grid(start: float, stop: float, step: float) -> list[float]:
    n = int(np.floor((stop - start) / step + 1e-9)) + 1
    return [float(start + i * step) for i in range(n)]
