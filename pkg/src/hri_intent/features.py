"""Frame vector layout: 17 pose keypoints (x, y, c), 7 emotion probabilities, intent label"""
from enum import Enum, IntEnum, auto


class Keypoint(IntEnum):
    """COCO-17 keypoint order produced by the pose extractor"""

    nose = 0
    left_eye = auto()
    right_eye = auto()
    left_ear = auto()
    right_ear = auto()
    left_shoulder = auto()
    right_shoulder = auto()
    left_elbow = auto()
    right_elbow = auto()
    left_wrist = auto()
    right_wrist = auto()
    left_hip = auto()
    right_hip = auto()
    left_knee = auto()
    right_knee = auto()
    left_ankle = auto()
    right_ankle = auto()


class Emotion(IntEnum):
    """Categorical emotion distribution order"""

    angry = 0
    disgust = auto()
    fear = auto()
    happy = auto()
    sad = auto()
    surprise = auto()
    neutral = auto()


N_KEYPOINTS = len(Keypoint)
N_EMOTIONS = len(Emotion)

POSE_DIM = 3 * N_KEYPOINTS
EMOTION_DIM = N_EMOTIONS
FRAME_DIM = POSE_DIM + EMOTION_DIM + 1

POSE_SLICE = slice(0, POSE_DIM)
EMOTION_SLICE = slice(POSE_DIM, POSE_DIM + EMOTION_DIM)
LABEL_INDEX = FRAME_DIM - 1

# Column indices into the frame vector
COORD_COLUMNS = [3 * k + i for k in range(N_KEYPOINTS) for i in (0, 1)]
CONF_COLUMNS = [3 * k + 2 for k in range(N_KEYPOINTS)]
N_COORDS = len(COORD_COLUMNS)


def pose_column(keypoint: Keypoint, channel: int) -> int:
    """Column of a keypoint channel (0=x, 1=y, 2=confidence)"""
    return 3 * int(keypoint) + channel


class InputMode(str, Enum):
    """Detector input selection, the label channel is never included"""

    pose_only = "pose_only"
    emotion_only = "emotion_only"
    multimodal = "multimodal"

    @property
    def columns(self) -> list[int]:
        match self:
            case InputMode.pose_only:
                return list(range(POSE_DIM))
            case InputMode.emotion_only:
                return list(range(EMOTION_SLICE.start, EMOTION_SLICE.stop))
            case InputMode.multimodal:
                return list(range(POSE_DIM + EMOTION_DIM))

    @property
    def width(self) -> int:
        return len(self.columns)
