import numpy as np

from hri_intent.data import Env, SequenceRecord, WindowSample
from hri_intent.features import (
    CONF_COLUMNS,
    COORD_COLUMNS,
    EMOTION_SLICE,
    FRAME_DIM,
    LABEL_INDEX,
    N_COORDS,
)


def make_frames(labels, rng: np.random.Generator | None = None) -> np.ndarray:
    """Valid frames with the given labels, random coordinates when rng is given"""
    labels = np.asarray(labels, dtype=np.float64)
    frames = np.zeros((len(labels), FRAME_DIM))
    frames[:, CONF_COLUMNS] = 0.5
    frames[:, EMOTION_SLICE] = 1.0 / 7.0
    frames[:, LABEL_INDEX] = labels
    if rng is not None:
        frames[:, COORD_COLUMNS] = rng.normal(size=(len(labels), N_COORDS))
        frames[:, CONF_COLUMNS] = rng.uniform(size=(len(labels), len(CONF_COLUMNS)))
        emotion = rng.uniform(0.1, 1.0, size=(len(labels), 7))
        frames[:, EMOTION_SLICE] = emotion / emotion.sum(axis=1, keepdims=True)
    return frames


def make_record(record_id: str, labels, env: Env = Env.Env1, seed: int = 0) -> SequenceRecord:
    return SequenceRecord(record_id, env, make_frames(labels, np.random.default_rng(seed)))


def make_window(labels, seed: int = 0, record_id: str = "w") -> WindowSample:
    return WindowSample(make_frames(labels, np.random.default_rng(seed)), record_id)
