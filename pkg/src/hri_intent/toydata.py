"""
Synthetic approach sequences for smoke runs and tests.

A skeleton walks in place (arm swing); in sequences with an onset the right arm rises
towards the robot and the emotion distribution shifts to happy from the onset on.
"""
import numpy as np

from .data import Env, SequenceRecord
from .features import (
    EMOTION_DIM,
    EMOTION_SLICE,
    FRAME_DIM,
    LABEL_INDEX,
    Emotion,
    Keypoint,
    pose_column,
)

# Box-normalized standing skeleton (x, y) in Keypoint order
_TEMPLATE = np.array(
    [
        [0.50, 0.10],
        [0.47, 0.08],
        [0.53, 0.08],
        [0.44, 0.10],
        [0.56, 0.10],
        [0.38, 0.25],
        [0.62, 0.25],
        [0.33, 0.42],
        [0.67, 0.42],
        [0.31, 0.58],
        [0.69, 0.58],
        [0.42, 0.60],
        [0.58, 0.60],
        [0.41, 0.80],
        [0.59, 0.80],
        [0.40, 0.98],
        [0.60, 0.98],
    ]
)
_RAISE = {Keypoint.right_wrist: -0.40, Keypoint.right_elbow: -0.15}
_RAISE_FRAMES = 5


def _emotion(rng: np.random.Generator, happy_weight: float) -> np.ndarray:
    logits = rng.normal(0.0, 0.3, EMOTION_DIM)
    logits[Emotion.neutral] += 2.0
    logits[Emotion.happy] += happy_weight
    p = np.exp(logits - logits.max())
    return p / p.sum()


def make_toy_sequence(
    record_id: str,
    length: int,
    onset: int | None,
    rng: np.random.Generator,
    env: Env = Env.Env1,
    noise: float = 0.02,
) -> SequenceRecord:
    features = np.zeros((length, FRAME_DIM))
    phase = rng.uniform(0, 2 * np.pi)
    for k in range(length):
        xy = _TEMPLATE.copy()
        swing = 0.03 * np.sin(phase + 0.4 * k)
        xy[[Keypoint.left_wrist, Keypoint.left_elbow], 1] += swing
        xy[[Keypoint.right_wrist, Keypoint.right_elbow], 1] -= swing
        raised = 0.0
        if onset is not None and k >= onset:
            raised = min(1.0, (k - onset + 1) / _RAISE_FRAMES)
            for kp, dy in _RAISE.items():
                xy[kp, 1] += raised * dy
        xy += rng.normal(0.0, noise, xy.shape)

        for kp in Keypoint:
            features[k, pose_column(kp, 0)] = xy[kp, 0]
            features[k, pose_column(kp, 1)] = xy[kp, 1]
            features[k, pose_column(kp, 2)] = rng.uniform(0.6, 1.0)
        features[k, EMOTION_SLICE] = _emotion(rng, 1.5 * raised)
        features[k, LABEL_INDEX] = float(onset is not None and k >= onset)
    return SequenceRecord(record_id, env, features)


def make_toy_dataset(
    n_sequences: int = 20,
    length: int = 60,
    positive_fraction: float = 0.5,
    seed: int = 0,
    env: Env = Env.Env1,
    onset_range: tuple[float, float] = (0.4, 0.8),
    noise: float = 0.02,
    id_prefix: str = "toy",
) -> list[SequenceRecord]:
    """n_sequences records, round(n * positive_fraction) of them with an intent onset"""
    rng = np.random.default_rng(seed)
    n_positive = int(round(n_sequences * positive_fraction))
    has_onset = np.zeros(n_sequences, dtype=bool)
    has_onset[rng.permutation(n_sequences)[:n_positive]] = True

    records = []
    for i in range(n_sequences):
        onset = None
        if has_onset[i]:
            lo, hi = (int(f * length) for f in onset_range)
            onset = int(rng.integers(lo, max(lo + 1, hi)))
        records.append(
            make_toy_sequence(f"{id_prefix}{env.value}_{i:03d}", length, onset, rng, env, noise)
        )
    return records
