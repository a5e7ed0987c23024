"""Metrics and report files for the touch classifier and the tracker."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from eskin.geometry import subregions_adjacent

N_CLASSES = 19


def accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape:
        raise ValueError(f"predictions {pred.shape} and labels {lab.shape} differ in shape")
    if lab.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.count_nonzero(pred == lab)) / lab.size


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth, columns = prediction."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def errors(self) -> int:
        return self.total - int(np.trace(self.counts))

    def adjacent_errors(self) -> int:
        n = 0
        for t, p in zip(*np.nonzero(self.counts)):
            if t != p and subregions_adjacent(int(t), int(p)):
                n += int(self.counts[t, p])
        return n

    def adjacency_fraction(self) -> float:
        """Share of errors between edge-adjacent sub-regions on one face (nan if none)."""
        e = self.errors
        return self.adjacent_errors() / e if e else float("nan")

    def top_errors(self, k: int = 5) -> list[tuple[int, int, int]]:
        off = self.counts.copy()
        np.fill_diagonal(off, 0)
        cells = [(int(off[t, p]), int(t), int(p)) for t, p in zip(*np.nonzero(off))]
        cells.sort(key=lambda c: (-c[0], c[1], c[2]))
        return [(t, p, n) for n, t, p in cells[:k]]

    def summary(self) -> dict:
        return {
            "frames": self.total,
            "errors": self.errors,
            "adjacent_errors": self.adjacent_errors(),
            "adjacency_fraction": self.adjacency_fraction(),
            "top_errors": self.top_errors(),
        }


def confusion(predictions, labels, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    pred = np.asarray(predictions, dtype=int)
    lab = np.asarray(labels, dtype=int)
    if pred.shape != lab.shape:
        raise ValueError(f"predictions {pred.shape} and labels {lab.shape} differ in shape")
    for name, a in (("labels", lab), ("predictions", pred)):
        if a.size and (a.min() < 0 or a.max() >= n_classes):
            raise ValueError(f"{name} must lie in 0..{n_classes - 1}")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (lab, pred), 1)
    return ConfusionMatrix(counts)


def marker_distances(pred, truth) -> np.ndarray:
    p = np.asarray(pred, dtype=float)
    t = np.asarray(truth, dtype=float)
    if p.shape != t.shape or p.shape[-1] != 3:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    return np.linalg.norm(p - t, axis=-1)


def average_distance(pred, truth) -> tuple[float, float]:
    """Mean and population std (mm) of the per-marker Euclidean errors."""
    d = marker_distances(pred, truth)
    if d.size == 0:
        raise ValueError("average distance of an empty set is undefined")
    return float(d.mean()), float(d.std())


def static_baseline(init_markers, n_frames) -> np.ndarray:
    """Predict the first-frame markers for every frame: (N, M, 3)."""
    return np.repeat(np.asarray(init_markers, dtype=float)[None], n_frames, axis=0)


@dataclass
class TrackingReport:
    ad: tuple[float, float]
    baseline_ad: tuple[float, float]
    per_marker: np.ndarray
    per_group: dict[int, float]
    samples: int
    markers: int

    @property
    def ratio(self) -> float:
        return self.ad[0] / self.baseline_ad[0] if self.baseline_ad[0] > 0 else float("inf")


def tracking_report(pred, truth, init, group_ids) -> TrackingReport:
    """AD of ``pred`` and of the static baseline ``init`` (both (N, M, 3))."""
    d = marker_distances(pred, truth)
    gids = np.asarray(group_ids)
    per_group = {int(g): float(d[gids == g].mean()) for g in np.unique(gids)}
    return TrackingReport(
        ad=average_distance(pred, truth),
        baseline_ad=average_distance(init, truth),
        per_marker=d.mean(axis=0),
        per_group=per_group,
        samples=d.shape[0],
        markers=d.shape[1],
    )


# --------------------------------------------------------------------------
# report files
# --------------------------------------------------------------------------
@dataclass
class EvalResults:
    """What :func:`emit_report` can write; every part is optional."""

    confusion: ConfusionMatrix | None = None
    accuracy: float | None = None
    tracking: TrackingReport | None = None
    trajectories: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)


def _writable(out_dir) -> Path:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write reports to {out}: {exc}") from exc
    return out


def write_confusion_csv(cm: ConfusionMatrix, path) -> Path:
    path = Path(path)
    n = cm.counts.shape[0]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred"] + [str(i) for i in range(n)])
        for i in range(n):
            w.writerow([str(i)] + [str(int(v)) for v in cm.counts[i]])
    return path


def plot_confusion(cm: ConfusionMatrix, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = cm.counts.sum(axis=1, keepdims=True)
    frac = np.divide(cm.counts, rows, out=np.zeros(cm.counts.shape), where=rows > 0)
    fig, ax = plt.subplots(figsize=(7, 6))
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    n = cm.counts.shape[0]
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    fig.colorbar(im, ax=ax, label="row fraction")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_trajectory(pred: np.ndarray, truth: np.ndarray, path, title: str = "") -> Path:
    """Predicted vs true marker paths, in the y-z plane and per axis over time."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5))
    m = truth.shape[1]
    colors = plt.cm.viridis(np.linspace(0, 1, m))
    for j in range(m):
        axes[0].plot(truth[:, j, 1], truth[:, j, 2], "-", color=colors[j], lw=1.5)
        axes[0].plot(pred[:, j, 1], pred[:, j, 2], "--", color=colors[j], lw=1)
    axes[0].set_xlabel("y (mm)")
    axes[0].set_ylabel("z (mm)")
    axes[0].set_title("solid: truth, dashed: prediction")
    t = np.arange(len(truth))
    err = np.linalg.norm(pred - truth, axis=-1)
    for j in range(m):
        axes[1].plot(t, err[:, j], color=colors[j], lw=1, label=f"marker {j + 1}")
    axes[1].set_xlabel("frame")
    axes[1].set_ylabel("distance error (mm)")
    axes[1].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def emit_report(results: EvalResults, out_dir) -> list[Path]:
    """Write CSV tables and figures for whatever ``results`` contains."""
    out = _writable(out_dir)
    written = []
    if results.confusion is not None:
        cm = results.confusion
        written.append(write_confusion_csv(cm, out / "confusion.csv"))
        written.append(plot_confusion(cm, out / "confusion.png"))
        summary = cm.summary()
        acc = results.accuracy if results.accuracy is not None else 1 - cm.errors / max(cm.total, 1)
        with open(out / "touch_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["accuracy", repr(acc)])
            for k in ("frames", "errors", "adjacent_errors", "adjacency_fraction"):
                w.writerow([k, summary[k]])
            for t, p, n in summary["top_errors"]:
                w.writerow([f"error_true{t}_pred{p}", n])
        written.append(out / "touch_metrics.csv")
    if results.tracking is not None:
        rep = results.tracking
        with open(out / "tracking_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean_mm", "std_mm"])
            w.writerow(["model_ad", repr(rep.ad[0]), repr(rep.ad[1])])
            w.writerow(["static_baseline_ad", repr(rep.baseline_ad[0]), repr(rep.baseline_ad[1])])
            for j, v in enumerate(rep.per_marker):
                w.writerow([f"marker_{j + 1}_ad", repr(float(v)), ""])
        written.append(out / "tracking_metrics.csv")
        with open(out / "tracking_groups.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group_id", "ad_mm"])
            for g, v in sorted(rep.per_group.items()):
                w.writerow([g, repr(v)])
        written.append(out / "tracking_groups.csv")
    for gid, (pred, truth) in sorted(results.trajectories.items()):
        written.append(plot_trajectory(pred, truth, out / f"trajectory_{gid}.png", f"group {gid}"))
    return written
