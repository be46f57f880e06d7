"""
Dataset model for pose + emotion + label frame sequences: file I/O, box normalization,
z-standardization, windowing, sequence-level splits and minority rebalancing.
"""
import json
import logging
import math
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np
from sklearn.model_selection import StratifiedKFold

from .features import (
    CONF_COLUMNS,
    COORD_COLUMNS,
    EMOTION_DIM,
    EMOTION_SLICE,
    FRAME_DIM,
    LABEL_INDEX,
    N_COORDS,
    N_KEYPOINTS,
    POSE_SLICE,
)

logger = logging.getLogger(__name__)

WINDOW_LENGTH = 15
POSITIVE_FRAMES_THRESHOLD = 7
DEFAULT_STRIDE = 5
STD_FLOOR = 1e-6
EMOTION_SUM_TOL = 1e-6


class FrameValidationError(ValueError):
    """A frame violates the FrameFeature invariants"""


class DatasetFormatError(ValueError):
    """A dataset file line cannot be parsed into a record"""

    def __init__(self, path: Path | str, line: int, field_name: str, reason: str) -> None:
        super().__init__(f"{path}:{line}: field '{field_name}': {reason}")
        self.path = path
        self.line = line
        self.field_name = field_name


class SplitError(ValueError):
    """A split cannot be produced from the given records"""


class Env(IntEnum):
    Env1 = 1
    Env2 = 2
    Env3 = 3


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.flags.writeable = False
    return array


def validate_features(features: np.ndarray, where: str = "frames") -> None:
    """Check FrameFeature invariants on an (N, 59) block, raising with the offending field"""
    if features.ndim != 2 or features.shape[1] != FRAME_DIM:
        raise FrameValidationError(f"{where}: expected shape (N, {FRAME_DIM}), got {features.shape}")
    if not np.isfinite(features).all():
        raise FrameValidationError(f"{where}: non-finite values")
    conf = features[:, CONF_COLUMNS]
    if ((conf < 0.0) | (conf > 1.0)).any():
        k = int(np.argwhere((conf < 0.0) | (conf > 1.0))[0, 0])
        raise FrameValidationError(f"{where}[{k}].pose: confidence outside [0, 1]")
    emotion = features[:, EMOTION_SLICE]
    if (emotion < 0.0).any():
        k = int(np.argwhere(emotion < 0.0)[0, 0])
        raise FrameValidationError(f"{where}[{k}].emotion: negative probability")
    bad_sum = np.abs(emotion.sum(axis=1) - 1.0) > EMOTION_SUM_TOL
    if bad_sum.any():
        k = int(np.argmax(bad_sum))
        total = emotion[k].sum()
        raise FrameValidationError(f"{where}[{k}].emotion: sums to {total:.6f}, expected 1")
    labels = features[:, LABEL_INDEX]
    if not np.isin(labels, (0.0, 1.0)).all():
        k = int(np.argmax(~np.isin(labels, (0.0, 1.0))))
        raise FrameValidationError(f"{where}[{k}].label: must be 0 or 1")


@dataclass(frozen=True)
class FrameFeature:
    """One frame: pose (17, 3) box-normalized x, y and confidence, emotion (7,), label"""

    pose: np.ndarray
    emotion: np.ndarray
    label: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "pose", _frozen(np.reshape(self.pose, (N_KEYPOINTS, 3))))
        object.__setattr__(self, "emotion", _frozen(np.reshape(self.emotion, (EMOTION_DIM,))))
        object.__setattr__(self, "label", int(self.label))
        validate_features(self.to_vector()[None], "frame")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.pose.reshape(-1), self.emotion, [float(self.label)]])

    @classmethod
    def from_vector(cls, vector: np.ndarray) -> "FrameFeature":
        vector = np.asarray(vector, dtype=np.float64)
        return cls(vector[POSE_SLICE], vector[EMOTION_SLICE], int(vector[LABEL_INDEX]))


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    w: float
    h: float


@dataclass(frozen=True)
class RawFrame:
    """Pixel-space detector output for one person in one frame"""

    pose_px: np.ndarray
    bbox: BoundingBox
    emotion: np.ndarray
    label: int


def normalize_pose(raw: RawFrame) -> FrameFeature:
    """Map keypoint pixels into the person box: ((x - x_min) / w, (y - y_min) / h)"""
    box = raw.bbox
    if box.w <= 0 or box.h <= 0:
        raise FrameValidationError(f"bbox must have positive area, got w={box.w}, h={box.h}")
    pose = np.array(raw.pose_px, dtype=np.float64).reshape(N_KEYPOINTS, 3).copy()
    pose[:, 0] = (pose[:, 0] - box.x_min) / box.w
    pose[:, 1] = (pose[:, 1] - box.y_min) / box.h
    return FrameFeature(pose, raw.emotion, raw.label)


@dataclass(frozen=True)
class SequenceRecord:
    """
    Ordered frames of one tracked person. features is (N, 59); label_scores keeps the raw
    label probabilities of generated sequences (labels in features are binarized).
    """

    id: str
    env: Env
    features: np.ndarray
    label_scores: np.ndarray | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "env", Env(int(self.env)))
        object.__setattr__(self, "features", _frozen(self.features))
        if self.label_scores is not None:
            object.__setattr__(self, "label_scores", _frozen(self.label_scores))
            if self.label_scores.shape != (self.features.shape[0],):
                raise FrameValidationError(
                    f"{self.id}.label_scores: expected one score per frame, "
                    f"got {self.label_scores.shape}"
                )
        validate_features(self.features, f"{self.id}.frames")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.env == other.env
            and np.array_equal(self.features, other.features)
            and (self.label_scores is None) == (other.label_scores is None)
            and (
                self.label_scores is None
                or np.array_equal(self.label_scores, other.label_scores)
            )
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def frames(self) -> list[FrameFeature]:
        return [FrameFeature.from_vector(v) for v in self.features]

    @property
    def labels(self) -> np.ndarray:
        return self.features[:, LABEL_INDEX].astype(np.int64)

    @property
    def onset_index(self) -> int | None:
        positive = np.flatnonzero(self.labels == 1)
        return int(positive[0]) if positive.size else None

    @property
    def has_positive(self) -> bool:
        return self.onset_index is not None

    def with_features(self, features: np.ndarray) -> "SequenceRecord":
        return SequenceRecord(self.id, self.env, features, self.label_scores)


# --- Standardization ---


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate statistics of the 34 box-normalized pose coordinates"""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "mean", _frozen(self.mean))
        object.__setattr__(self, "std", _frozen(self.std))
        assert self.mean.shape == (N_COORDS,) and self.std.shape == (N_COORDS,)
        assert (self.std > 0).all(), "standard deviations must be positive"

    def invert(self, features: np.ndarray) -> np.ndarray:
        """Standardized coordinates back to box-normalized ones"""
        out = np.array(features, dtype=np.float64, copy=True)
        out[..., COORD_COLUMNS] = out[..., COORD_COLUMNS] * self.std + self.mean
        return out

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Standardizer":
        return cls(np.asarray(data["mean"], dtype=np.float64), np.asarray(data["std"]))


def stack_frames(records: Iterable[SequenceRecord]) -> np.ndarray:
    blocks = [r.features for r in records]
    return np.concatenate(blocks, axis=0) if blocks else np.empty((0, FRAME_DIM))


def fit_standardizer(train_frames: np.ndarray | Sequence[SequenceRecord]) -> Standardizer:
    """Fit on training frames only; constant coordinates get std floored at 1e-6"""
    if not isinstance(train_frames, np.ndarray):
        train_frames = stack_frames(train_frames)
    if train_frames.shape[0] < 2:
        raise ValueError(f"need at least 2 training frames, got {train_frames.shape[0]}")
    coords = train_frames[:, COORD_COLUMNS]
    return Standardizer(coords.mean(axis=0), np.maximum(coords.std(axis=0), STD_FLOOR))


def apply_standardizer(frames: np.ndarray, s: Standardizer) -> np.ndarray:
    """Standardize pose coordinates; confidences, emotions and labels are untouched"""
    out = np.array(frames, dtype=np.float64, copy=True)
    out[..., COORD_COLUMNS] = (out[..., COORD_COLUMNS] - s.mean) / s.std
    return out


def standardize_records(records: Iterable[SequenceRecord], s: Standardizer) -> list[SequenceRecord]:
    return [r.with_features(apply_standardizer(r.features, s)) for r in records]


def save_standardizer(s: Standardizer, path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(s.to_dict(), f)


def load_standardizer(path: Path) -> Standardizer:
    with open(path, "r", encoding="utf-8") as f:
        return Standardizer.from_dict(json.load(f))


# --- Windowing ---


def window_label(labels: np.ndarray, min_positive: int = POSITIVE_FRAMES_THRESHOLD) -> int:
    """Ground truth window rule: positive iff at least min_positive positive frames"""
    return int(np.count_nonzero(labels) >= min_positive)


@dataclass(frozen=True)
class WindowSample:
    """T consecutive frames; the model sees frames 1..T-1 and predicts frames 2..T"""

    frames: np.ndarray
    record_id: str = ""
    start: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "frames", _frozen(self.frames))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WindowSample):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.start == other.start
            and np.array_equal(self.frames, other.frames)
        )

    __hash__ = None  # type: ignore[assignment]

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def input_view(self) -> np.ndarray:
        return self.frames[:-1]

    @property
    def target_view(self) -> np.ndarray:
        return self.frames[1:]

    @property
    def labels(self) -> np.ndarray:
        return self.frames[:, LABEL_INDEX].astype(np.int64)

    @property
    def window_label(self) -> int:
        return window_label(self.labels)


@dataclass
class WindowSet:
    windows: list[WindowSample] = field(default_factory=list)
    skipped_records: list[str] = field(default_factory=list)

    @property
    def positive_fraction(self) -> float:
        if not self.windows:
            return 0.0
        return sum(w.window_label for w in self.windows) / len(self.windows)


def window_starts(length: int, window: int, stride: int) -> list[int]:
    return list(range(0, length - window + 1, stride))


def window_sequences(
    records: Iterable[SequenceRecord], T: int = WINDOW_LENGTH, stride: int = DEFAULT_STRIDE
) -> WindowSet:
    """Sliding T-frame windows at the given stride, records shorter than T are skipped"""
    assert T >= 2 and stride >= 1
    result = WindowSet()
    for record in records:
        if len(record) < T:
            result.skipped_records.append(record.id)
            continue
        for start in window_starts(len(record), T, stride):
            result.windows.append(WindowSample(record.features[start : start + T], record.id, start))
    if result.skipped_records:
        logger.warning(
            "Skipped %d records shorter than %d frames", len(result.skipped_records), T
        )
    return result


def stack_windows(windows: Sequence[WindowSample]) -> np.ndarray:
    return np.stack([w.frames for w in windows]) if windows else np.empty((0, 0, FRAME_DIM))


def write_window_index(windows: Sequence[WindowSample], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("record_id,start,window_label\n")
        f.writelines(f"{w.record_id},{w.start},{w.window_label}\n" for w in windows)


# --- Splits ---


@dataclass
class Fold:
    index: int
    train: list[SequenceRecord]
    validation: list[SequenceRecord]


def _strata(records: Sequence[SequenceRecord]) -> np.ndarray:
    return np.array([int(r.has_positive) for r in records])


def stratified_kfold(records: Sequence[SequenceRecord], k: int = 5, seed: int = 0) -> list[Fold]:
    """Sequence-level stratified folds, key = sequence contains a positive frame"""
    if k < 2:
        raise SplitError(f"k must be at least 2, got {k}")
    if k > len(records):
        raise SplitError(f"k={k} exceeds the number of sequences ({len(records)})")
    strata = _strata(records)
    if len(np.unique(strata)) < 2:
        raise SplitError("both positive-containing and negative-only sequences are required")
    splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
    return [
        Fold(i, [records[j] for j in train_idx], [records[j] for j in valid_idx])
        for i, (train_idx, valid_idx) in enumerate(splitter.split(np.zeros(len(records)), strata))
    ]


def two_split_heldout(
    records_env12: Sequence[SequenceRecord], seed: int = 0
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """Two disjoint stratified halves of Env 1+2, Env 3 is the shared held-out test set"""
    env3 = [r.id for r in records_env12 if r.env == Env.Env3]
    if env3:
        raise SplitError(f"Env3 records are reserved for testing: {env3[:5]}")
    folds = stratified_kfold(records_env12, k=2, seed=seed)
    return folds[0].validation, folds[1].validation


def split_by_env(
    records: Iterable[SequenceRecord],
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """(Env 1+2 records, Env 3 records)"""
    records = list(records)
    return [r for r in records if r.env != Env.Env3], [r for r in records if r.env == Env.Env3]


# --- Rebalancing ---

WindowGenerator = Callable[[int], Sequence[WindowSample]]


def synthetic_needed(n_total: int, n_positive: int, target_positive_fraction: float) -> int:
    """Smallest n with (n_positive + n) / (n_total + n) >= target"""
    deficit = target_positive_fraction * n_total - n_positive
    if deficit <= 0:
        return 0
    return max(0, math.ceil(deficit / (1.0 - target_positive_fraction) - 1e-9))


def rebalance(
    train_windows: Sequence[WindowSample],
    generator: WindowGenerator,
    target_positive_fraction: float = 0.5,
) -> list[WindowSample]:
    """Append generated minority windows until the positive fraction reaches the target"""
    if not 0.0 < target_positive_fraction < 1.0:
        raise ValueError(f"target fraction must be in (0, 1), got {target_positive_fraction}")
    augmented = list(train_windows)
    n_positive = sum(w.window_label for w in augmented)
    needed = synthetic_needed(len(augmented), n_positive, target_positive_fraction)
    if needed == 0:
        return augmented

    synthetic = list(generator(needed))
    if len(synthetic) < needed:
        raise RuntimeError(f"generator returned {len(synthetic)} windows, {needed} requested")
    for i, window in enumerate(synthetic[:needed]):
        validate_features(window.frames, f"synthetic[{i}]")
        if window.window_label != 1:
            raise FrameValidationError(f"synthetic[{i}]: generated window is not positive")
    augmented.extend(synthetic[:needed])
    logger.info(
        "Rebalanced %d windows (%d positive) with %d synthetic positives",
        len(train_windows),
        n_positive,
        needed,
    )
    return augmented


# --- Summaries ---


@dataclass(frozen=True)
class BalanceRow:
    env: str
    sequences: int
    frames: int
    positive_frames: int

    @property
    def positive_percent(self) -> float:
        return 100.0 * self.positive_frames / self.frames if self.frames else 0.0

    def __str__(self) -> str:
        return (
            f"{self.env}: {self.sequences} sequences, {self.frames:,} frames "
            f"({self.positive_percent:.1f}% intent)"
        )


def class_balance(records: Iterable[SequenceRecord]) -> list[BalanceRow]:
    """Sequences, frames and positive-frame share per environment plus a total row"""
    per_env: dict[str, list[SequenceRecord]] = {}
    records = list(records)
    for r in records:
        per_env.setdefault(r.env.name, []).append(r)
    rows = [
        BalanceRow(
            env,
            len(group),
            sum(len(r) for r in group),
            int(sum(r.labels.sum() for r in group)),
        )
        for env, group in sorted(per_env.items())
    ]
    rows.append(
        BalanceRow(
            "All",
            len(records),
            sum(len(r) for r in records),
            int(sum(r.labels.sum() for r in records)),
        )
    )
    return rows


# --- File I/O ---


def _frame_to_json(vector: np.ndarray, label_score: float | None = None) -> dict[str, Any]:
    pose = vector[POSE_SLICE].reshape(N_KEYPOINTS, 3)
    obj = {
        "pose": pose.tolist(),
        "emotion": vector[EMOTION_SLICE].tolist(),
        "label": int(vector[LABEL_INDEX]),
    }
    if label_score is not None:
        obj["label_score"] = float(label_score)
    return obj


def _require(obj: dict[str, Any], key: str, path: Path, line: int, prefix: str = "") -> Any:
    if key not in obj:
        raise DatasetFormatError(path, line, f"{prefix}{key}", "missing")
    return obj[key]


def _frame_from_json(obj: Any, path: Path, line: int, prefix: str) -> np.ndarray:
    if not isinstance(obj, dict):
        raise DatasetFormatError(path, line, prefix.rstrip("."), "frame must be an object")
    try:
        pose = np.asarray(_require(obj, "pose", path, line, prefix), dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise DatasetFormatError(path, line, f"{prefix}pose", str(err)) from err
    if pose.shape != (N_KEYPOINTS, 3):
        raise DatasetFormatError(
            path, line, f"{prefix}pose", f"expected {N_KEYPOINTS}x3, got {pose.shape}"
        )
    try:
        emotion = np.asarray(_require(obj, "emotion", path, line, prefix), dtype=np.float64)
    except (TypeError, ValueError) as err:
        raise DatasetFormatError(path, line, f"{prefix}emotion", str(err)) from err
    if emotion.shape != (EMOTION_DIM,):
        raise DatasetFormatError(
            path, line, f"{prefix}emotion", f"expected {EMOTION_DIM} values, got {emotion.shape}"
        )
    label = _require(obj, "label", path, line, prefix)
    if label not in (0, 1):
        raise DatasetFormatError(path, line, f"{prefix}label", f"must be 0 or 1, got {label!r}")

    if "bbox" in obj:
        try:
            box = BoundingBox(*(float(v) for v in obj["bbox"]))
        except (TypeError, ValueError) as err:
            raise DatasetFormatError(path, line, f"{prefix}bbox", str(err)) from err
        try:
            frame = normalize_pose(RawFrame(pose, box, emotion, int(label)))
        except FrameValidationError as err:
            raise DatasetFormatError(path, line, f"{prefix}bbox", str(err)) from err
        return frame.to_vector()
    return np.concatenate([pose.reshape(-1), emotion, [float(label)]])


def _label_scores_from_json(
    frames: list[dict[str, Any]], path: Path, line: int
) -> np.ndarray | None:
    """Raw label scores of generated records, all frames or none"""
    present = ["label_score" in f for f in frames]
    if not any(present):
        return None
    if not all(present):
        missing = present.index(False)
        raise DatasetFormatError(
            path, line, f"frames[{missing}].label_score", "missing while other frames have one"
        )
    scores = []
    for k, f in enumerate(frames):
        score = f["label_score"]
        valid = isinstance(score, (int, float)) and not isinstance(score, bool)
        if not valid or not 0.0 <= score <= 1.0:
            raise DatasetFormatError(
                path, line, f"frames[{k}].label_score", f"must be in [0, 1], got {score!r}"
            )
        scores.append(float(score))
    return np.asarray(scores, dtype=np.float64)


def _record_from_json(obj: Any, path: Path, line: int) -> SequenceRecord:
    if not isinstance(obj, dict):
        raise DatasetFormatError(path, line, "<record>", "record must be an object")
    record_id = _require(obj, "id", path, line)
    if not isinstance(record_id, str):
        raise DatasetFormatError(path, line, "id", "must be a string")
    env = _require(obj, "env", path, line)
    if env not in (1, 2, 3):
        raise DatasetFormatError(path, line, "env", f"must be 1, 2 or 3, got {env!r}")
    frames = _require(obj, "frames", path, line)
    if not isinstance(frames, list) or not frames:
        raise DatasetFormatError(path, line, "frames", "must be a non-empty array")
    features = np.stack(
        [_frame_from_json(f, path, line, f"frames[{k}].") for k, f in enumerate(frames)]
    )
    try:
        validate_features(features, "frames")
    except FrameValidationError as err:
        field_name, _, reason = str(err).partition(": ")
        raise DatasetFormatError(path, line, field_name, reason) from err
    scores = _label_scores_from_json(frames, path, line)
    return SequenceRecord(record_id, Env(env), features, scores)


def load_dataset(path: Path) -> list[SequenceRecord]:
    """Read one JSON record per line; blank lines are ignored"""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    records: list[SequenceRecord] = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise DatasetFormatError(path, line_no, "<record>", f"invalid JSON: {err}") from err
            records.append(_record_from_json(obj, path, line_no))
    return records


def save_dataset(records: Iterable[SequenceRecord], path: Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            obj = {
                "id": r.id,
                "env": int(r.env),
                "frames": [
                    _frame_to_json(v, None if r.label_scores is None else r.label_scores[k])
                    for k, v in enumerate(r.features)
                ],
            }
            f.write(json.dumps(obj) + "\n")
