"""
Frame- and sequence-level metrics, precision/recall sweeps, onset-aligned trajectories,
the real-vs-synthetic discriminative score and report emission.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.metrics import balanced_accuracy_score, f1_score, roc_auc_score, roc_curve
from sklearn.model_selection import train_test_split
from torch import Tensor, nn
from torch.nn import functional as F
from torch.utils.data import DataLoader, TensorDataset

from .data import (
    POSITIVE_FRAMES_THRESHOLD,
    WINDOW_LENGTH,
    SequenceRecord,
    WindowSample,
    stack_windows,
    window_label,
    window_starts,
)
from .features import FRAME_DIM
from .numerics import DTYPE, AdamConfig, Rng, make_adam

logger = logging.getLogger(__name__)

METRIC_NAMES = ("auroc", "macro_f1", "balanced_accuracy")


class MetricError(ValueError):
    """A metric is undefined for the given inputs"""


@dataclass(frozen=True)
class DecisionRule:
    """A window fires when k_run consecutive frame probabilities reach threshold"""

    threshold: float = 0.5
    k_run: int = POSITIVE_FRAMES_THRESHOLD
    window: int = WINDOW_LENGTH

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if not 1 <= self.k_run <= self.window:
            raise ValueError(f"need 1 <= k_run <= window, got k_run={self.k_run}")


def _window_probs(frame_probs: np.ndarray | Sequence[float], rule: DecisionRule) -> np.ndarray:
    probs = np.asarray(frame_probs, dtype=np.float64)
    if probs.shape != (rule.window,):
        raise MetricError(f"expected {rule.window} frame probabilities, got shape {probs.shape}")
    return probs


def sequence_score(frame_probs: np.ndarray | Sequence[float], rule: DecisionRule) -> float:
    """Lowest threshold at which the window fires: max over k_run-runs of the run minimum"""
    probs = _window_probs(frame_probs, rule)
    return float(sliding_window_view(probs, rule.k_run).min(axis=1).max())


def sequence_decision(frame_probs: np.ndarray | Sequence[float], rule: DecisionRule) -> int:
    return int(sequence_score(frame_probs, rule) >= rule.threshold)


def _window_scores(window_probs: np.ndarray, rule: DecisionRule) -> np.ndarray:
    window_probs = np.asarray(window_probs, dtype=np.float64).reshape(-1, rule.window)
    if window_probs.shape[0] == 0:
        return np.empty(0)
    return sliding_window_view(window_probs, rule.k_run, axis=1).min(axis=2).max(axis=1)


# --- Scalar metrics ---


def roc_auc(scores: np.ndarray | Sequence[float], labels: np.ndarray | Sequence[int]) -> float:
    """Probability a random positive outranks a random negative, ties count one half"""
    labels = np.asarray(labels).astype(np.int64)
    if np.unique(labels).size < 2:
        raise MetricError("AUROC needs both positive and negative labels")
    return float(roc_auc_score(labels, np.asarray(scores, dtype=np.float64)))


def macro_f1(pred_labels: np.ndarray | Sequence[int], true_labels: np.ndarray | Sequence[int]) -> float:
    return float(
        f1_score(true_labels, pred_labels, average="macro", labels=[0, 1], zero_division=0)
    )


def balanced_accuracy(
    pred_labels: np.ndarray | Sequence[int], true_labels: np.ndarray | Sequence[int]
) -> float:
    return float(balanced_accuracy_score(true_labels, pred_labels))


@dataclass(frozen=True)
class MetricSet:
    auroc: float
    macro_f1: float
    balanced_accuracy: float

    @classmethod
    def compute(cls, scores: np.ndarray, labels: np.ndarray, threshold: float) -> "MetricSet":
        preds = (scores >= threshold).astype(np.int64)
        return cls(roc_auc(scores, labels), macro_f1(preds, labels), balanced_accuracy(preds, labels))


# --- Curves ---


@dataclass(frozen=True)
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    @classmethod
    def compute(cls, scores: np.ndarray, labels: np.ndarray) -> "RocCurve":
        fpr, tpr, thresholds = roc_curve(labels, scores)
        return cls(fpr, tpr, thresholds)


@dataclass(frozen=True)
class PrCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def default_threshold_grid(points: int = 99) -> np.ndarray:
    """Evenly spaced grid 0.01..0.99 for 99 points"""
    return np.linspace(0.01, 0.99, points)


def precision_recall_sweep(
    frame_probs_per_window: np.ndarray,
    labels: np.ndarray | Sequence[int],
    rule: DecisionRule,
    thresholds: np.ndarray | None = None,
) -> PrCurve:
    """
    Sequence-level precision and recall for each threshold of the grid. Precision is 1 when
    nothing is predicted positive; recall is 0 when there are no positive windows.
    """
    grid = default_threshold_grid() if thresholds is None else np.asarray(thresholds, dtype=float)
    if ((grid <= 0) | (grid >= 1)).any():
        raise ValueError("threshold grid must lie in (0, 1)")
    scores = _window_scores(frame_probs_per_window, rule)
    labels = np.asarray(labels).astype(bool)

    fired = scores[None, :] >= grid[:, None]
    tp = (fired & labels[None, :]).sum(axis=1)
    predicted = fired.sum(axis=1)
    positives = labels.sum()
    precision = np.where(predicted > 0, tp / np.maximum(predicted, 1), 1.0)
    recall = tp / positives if positives else np.zeros_like(grid)
    return PrCurve(grid, precision, recall)


@dataclass(frozen=True)
class OnsetTrajectory:
    offsets: np.ndarray
    median: np.ndarray
    counts: np.ndarray


def onset_aligned_trajectories(
    records: Sequence[SequenceRecord],
    frame_probs: Sequence[np.ndarray],
    before: int = 30,
    after: int = 30,
) -> OnsetTrajectory:
    """Median probability across records per frame offset from the annotated onset"""
    offsets = np.arange(-before, after + 1)
    rows = []
    for record, probs in zip(records, frame_probs, strict=True):
        onset = record.onset_index
        if onset is None:
            continue
        row = np.full(offsets.shape, np.nan)
        index = onset + offsets
        valid = (index >= 0) & (index < len(probs))
        row[valid] = np.asarray(probs)[index[valid]]
        rows.append(row)
    if not rows:
        raise MetricError("no record with an intent onset")

    traj = np.stack(rows)
    counts = np.isfinite(traj).sum(axis=0)
    median = np.full(offsets.shape, np.nan)
    has_data = counts > 0
    median[has_data] = np.nanmedian(traj[:, has_data], axis=0)
    return OnsetTrajectory(offsets, median, counts)


# --- Fold evaluation and reports ---


@dataclass
class FoldMetrics:
    fold: int
    frame: MetricSet
    sequence: MetricSet
    roc_frame: RocCurve
    roc_sequence: RocCurve
    pr: PrCurve


def evaluate_predictions(
    records: Sequence[SequenceRecord],
    frame_probs: Sequence[np.ndarray],
    rule: DecisionRule,
    stride: int = 5,
    fold: int = 0,
    thresholds: np.ndarray | None = None,
) -> FoldMetrics:
    """
    Frame level scores every frame by its probability. Sequence level scores every T-frame
    window with sequence_score against the >= 7 positive frames ground truth.
    """
    all_probs, all_labels, windows, window_labels = [], [], [], []
    for record, probs in zip(records, frame_probs, strict=True):
        probs = np.asarray(probs, dtype=np.float64)
        assert probs.shape == (len(record),), f"{record.id}: one probability per frame expected"
        all_probs.append(probs)
        all_labels.append(record.labels)
        for start in window_starts(len(record), rule.window, stride):
            windows.append(probs[start : start + rule.window])
            window_labels.append(window_label(record.labels[start : start + rule.window]))

    frame_scores = np.concatenate(all_probs) if all_probs else np.empty(0)
    frame_labels = np.concatenate(all_labels) if all_labels else np.empty(0, dtype=np.int64)
    window_probs = np.stack(windows) if windows else np.empty((0, rule.window))
    seq_scores = _window_scores(window_probs, rule)
    seq_labels = np.asarray(window_labels, dtype=np.int64)
    for level, labels in (("frame", frame_labels), ("sequence", seq_labels)):
        if np.unique(labels).size < 2:
            raise MetricError(f"fold {fold}: {level} labels contain a single class")

    return FoldMetrics(
        fold,
        MetricSet.compute(frame_scores, frame_labels, rule.threshold),
        MetricSet.compute(seq_scores, seq_labels, rule.threshold),
        RocCurve.compute(frame_scores, frame_labels),
        RocCurve.compute(seq_scores, seq_labels),
        precision_recall_sweep(window_probs, seq_labels, rule, thresholds),
    )


@dataclass
class EvalReport:
    name: str
    folds: list[FoldMetrics] = field(default_factory=list)
    onset: OnsetTrajectory | None = None

    def values(self, level: str, metric: str) -> np.ndarray:
        return np.array([getattr(getattr(f, level), metric) for f in self.folds])

    def aggregate(self) -> dict[str, tuple[float, float]]:
        """'level.metric' -> (mean, population std) across folds"""
        assert self.folds, "report has no folds"
        out = {}
        for level in ("frame", "sequence"):
            for metric in METRIC_NAMES:
                v = self.values(level, metric)
                out[f"{level}.{metric}"] = (float(v.mean()), float(v.std()))
        return out

    def pr_summary(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Threshold grid with mean and std of precision and recall across folds"""
        precision = np.stack([f.pr.precision for f in self.folds])
        recall = np.stack([f.pr.recall for f in self.folds])
        grid = self.folds[0].pr.thresholds
        return grid, precision.mean(0), precision.std(0), recall.mean(0), recall.std(0)


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def write_report(report: EvalReport, out_dir: Path) -> None:
    """report.txt key=value lines plus roc_frame.csv, roc_seq.csv, pr_sweep.csv, onset_traj.csv"""
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = [f"name={report.name}", f"folds={len(report.folds)}"]
    for f in report.folds:
        for level in ("frame", "sequence"):
            for metric in METRIC_NAMES:
                lines.append(f"fold{f.fold}.{level}.{metric}={_fmt(getattr(getattr(f, level), metric))}")
    for key, (mean, std) in report.aggregate().items():
        lines.append(f"{key}.mean={_fmt(mean)}")
        lines.append(f"{key}.std={_fmt(std)}")
    with open(out_dir / "report.txt", "w", encoding="utf-8") as file:
        file.write("\n".join(lines) + "\n")

    for name, attr in (("roc_frame.csv", "roc_frame"), ("roc_seq.csv", "roc_sequence")):
        rows = [
            np.column_stack([np.full(c.fpr.shape, f.fold), c.fpr, c.tpr, c.thresholds])
            for f in report.folds
            for c in (getattr(f, attr),)
        ]
        np.savetxt(
            out_dir / name,
            np.concatenate(rows),
            delimiter=",",
            header="fold,fpr,tpr,threshold",
            comments="",
            fmt=["%d", "%.10g", "%.10g", "%.10g"],
        )

    np.savetxt(
        out_dir / "pr_sweep.csv",
        np.column_stack(report.pr_summary()),
        delimiter=",",
        header="threshold,precision_mean,precision_std,recall_mean,recall_std",
        comments="",
        fmt="%.10g",
    )

    if report.onset is not None:
        o = report.onset
        np.savetxt(
            out_dir / "onset_traj.csv",
            np.column_stack([o.offsets, o.median, o.counts]),
            delimiter=",",
            header="offset,median_probability,count",
            comments="",
            fmt=["%d", "%.10g", "%d"],
        )


# --- Discriminative score ---


@dataclass(frozen=True)
class DiscriminatorConfig:
    hidden: int = 32
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    test_fraction: float = 0.2


class SequenceDiscriminator(nn.Module):
    """Single-layer GRU over a window, sigmoid head on the final hidden state"""

    def __init__(self, hidden: int = 32, width: int = FRAME_DIM) -> None:
        super().__init__()
        self.gru = nn.GRU(width, hidden, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x: Tensor) -> Tensor:
        _, h_n = self.gru(x)
        return self.head(h_n[-1]).squeeze(-1)


@dataclass(frozen=True)
class DiscriminativeResult:
    accuracy: float
    score: float

    def __str__(self) -> str:
        return f"accuracy={self.accuracy:.4f} D={self.score:.4f}"


def discriminative_score(
    real_windows: Sequence[WindowSample],
    synth_windows: Sequence[WindowSample],
    rng: Rng,
    config: DiscriminatorConfig = DiscriminatorConfig(),
) -> DiscriminativeResult:
    """Held-out accuracy of a real-vs-synthetic classifier on a stratified split, D = |0.5 - acc|"""
    if not real_windows or not synth_windows:
        raise MetricError("both real and synthetic windows are required")
    x = np.concatenate([stack_windows(real_windows), stack_windows(synth_windows)])
    y = np.concatenate([np.ones(len(real_windows)), np.zeros(len(synth_windows))])
    try:
        x_train, x_test, y_train, y_test = train_test_split(
            x, y, test_size=config.test_fraction, stratify=y, random_state=rng.seed
        )
    except ValueError as err:
        raise MetricError(f"cannot split {len(y)} windows for the discriminator: {err}") from err

    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        model = SequenceDiscriminator(config.hidden, x.shape[-1]).to(DTYPE)
    optimizer = make_adam(model.parameters(), AdamConfig(lr=config.lr))
    loader = DataLoader(
        TensorDataset(torch.as_tensor(x_train, dtype=DTYPE), torch.as_tensor(y_train, dtype=DTYPE)),
        batch_size=config.batch_size,
        shuffle=True,
        generator=rng.generator,
    )
    model.train()
    for _ in range(config.epochs):
        for xb, yb in loader:
            loss = F.binary_cross_entropy_with_logits(model(xb), yb)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()

    model.eval()
    with torch.no_grad():
        logits = model(torch.as_tensor(x_test, dtype=DTYPE)).numpy()
    accuracy = float(((logits >= 0.0) == (y_test == 1)).mean())
    result = DiscriminativeResult(accuracy, abs(0.5 - accuracy))
    logger.info("Discriminative score: %s", result)
    return result
