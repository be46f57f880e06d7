"""
Per-frame intent classifiers over windowed pose / emotion features: single-layer GRU and
LSTM with a linear head, and a one-block Transformer encoder with a learnable positional
embedding.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.nn import functional as F
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from .data import (
    DEFAULT_STRIDE,
    WINDOW_LENGTH,
    SequenceRecord,
    WindowSample,
    stack_windows,
    window_starts,
)
from .evaluation import roc_auc
from .features import LABEL_INDEX, InputMode
from .mintrvae import CheckpointError, NonFiniteLossError
from .numerics import DTYPE, AdamConfig, Rng, ShapeError, check_width, is_finite, make_adam

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "detector"


class Backbone(str, Enum):
    gru = "gru"
    lstm = "lstm"
    transformer = "transformer"


class Variant(str, Enum):
    """Ablation rows: input selection and whether training windows are VAE-rebalanced"""

    pose_only = "pose_only"
    emotion_only = "emotion_only"
    multimodal = "multimodal"
    multimodal_vae = "multimodal_vae"

    @property
    def input_mode(self) -> InputMode:
        if self is Variant.multimodal_vae:
            return InputMode.multimodal
        return InputMode(self.value)

    @property
    def augmented(self) -> bool:
        return self is Variant.multimodal_vae


def reference_hidden(backbone: Backbone, input_mode: InputMode) -> int:
    """Hidden sizes of the reference runs"""
    match input_mode:
        case InputMode.pose_only:
            return 256
        case InputMode.emotion_only:
            return 16
        case InputMode.multimodal:
            return 256 if backbone is Backbone.transformer else 96


@dataclass(frozen=True)
class DetectorConfig:
    """hidden=None selects the reference size for the backbone and input mode"""

    backbone: Backbone = Backbone.transformer
    input_mode: InputMode = InputMode.multimodal
    hidden: int | None = None
    heads: int = 4
    dropout: float = 0.0
    window: int = WINDOW_LENGTH
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 200
    patience: int = 50
    log_interval: int = 25

    def __post_init__(self) -> None:
        object.__setattr__(self, "backbone", Backbone(self.backbone))
        object.__setattr__(self, "input_mode", InputMode(self.input_mode))
        if self.hidden is not None and self.hidden < 1:
            raise ValueError(f"hidden must be positive, got {self.hidden}")
        if self.backbone is Backbone.transformer and self.hidden_size % self.heads != 0:
            raise ValueError(f"{self.heads} heads do not divide model width {self.hidden_size}")
        if self.window < 1 or self.epochs < 1 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("window, epochs, batch_size and patience must be >= 1")

    @property
    def hidden_size(self) -> int:
        return self.hidden if self.hidden is not None else reference_hidden(self.backbone, self.input_mode)

    def for_variant(self, variant: Variant) -> "DetectorConfig":
        return replace(self, input_mode=variant.input_mode)


class RecurrentDetector(nn.Module):
    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        rnn = nn.GRU if config.backbone is Backbone.gru else nn.LSTM
        self.rnn = rnn(config.input_mode.width, config.hidden_size, batch_first=True)
        self.head = nn.Linear(config.hidden_size, 1)

    def forward(self, x: Tensor) -> Tensor:
        out, _ = self.rnn(x)
        return self.head(out).squeeze(-1)


class TransformerDetector(nn.Module):
    """Input projection, learnable positions, one encoder block, LayerNorm + linear head"""

    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        width = config.hidden_size
        self.window = config.window
        self.input_proj = nn.Linear(config.input_mode.width, width)
        self.position = nn.Parameter(torch.zeros(1, config.window, width))
        nn.init.normal_(self.position, std=0.02)
        self.encoder = nn.TransformerEncoderLayer(
            width, config.heads, 4 * width, dropout=config.dropout, batch_first=True
        )
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, 1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.window:
            raise ShapeError(f"transformer expects {self.window}-frame windows, got {tuple(x.shape)}")
        h = self.encoder(self.input_proj(x) + self.position)
        return self.head(self.norm(h)).squeeze(-1)


class IntentDetector(nn.Module):
    """Backbone selected by config; forward returns per-frame logits"""

    def __init__(self, config: DetectorConfig) -> None:
        super().__init__()
        self.config = config
        if config.backbone is Backbone.transformer:
            self.backbone = TransformerDetector(config)
        else:
            self.backbone = RecurrentDetector(config)

    def forward(self, x: Tensor) -> Tensor:
        check_width(x, self.config.input_mode.width, f"{self.config.input_mode.value} detector")
        return self.backbone(x)


def build_detector(config: DetectorConfig, rng: Rng) -> IntentDetector:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        return IntentDetector(config).to(DTYPE)


def select_features(frames: np.ndarray, input_mode: InputMode) -> np.ndarray:
    """Columns of the input mode; the label channel is never selected"""
    return np.asarray(frames)[..., input_mode.columns]


def detector_forward(detector: IntentDetector, window_features: Tensor | np.ndarray) -> Tensor:
    """Per-frame probabilities for (T, w) or (B, T, w) features"""
    x = torch.as_tensor(window_features, dtype=DTYPE)
    single = x.dim() == 2
    probs = torch.sigmoid(detector(x.unsqueeze(0) if single else x))
    return probs[0] if single else probs


def detector_loss(detector: IntentDetector, features: Tensor, labels: Tensor) -> Tensor:
    """Mean per-frame binary cross-entropy on logits"""
    return F.binary_cross_entropy_with_logits(detector(features), labels)


@dataclass(frozen=True)
class DetectorEpoch:
    epoch: int
    loss: float
    auroc: float


@dataclass
class TrainedDetector:
    detector: IntentDetector
    history: list[DetectorEpoch] = field(default_factory=list)
    best_epoch: int = 0
    monitor: str = "validation"


def _tensors(windows: Sequence[WindowSample], mode: InputMode) -> tuple[Tensor, Tensor]:
    frames = stack_windows(windows)
    return (
        torch.as_tensor(select_features(frames, mode), dtype=DTYPE),
        torch.as_tensor(frames[..., LABEL_INDEX], dtype=DTYPE),
    )


def _frame_auroc(detector: IntentDetector, x: Tensor, y: Tensor) -> float:
    detector.eval()
    with torch.no_grad():
        probs = torch.sigmoid(detector(x))
    detector.train()
    return roc_auc(probs.reshape(-1).numpy(), y.reshape(-1).numpy())


def train_detector(
    config: DetectorConfig,
    train_windows: Sequence[WindowSample],
    valid_windows: Sequence[WindowSample] | None,
    rng: Rng,
    progress: bool = True,
) -> TrainedDetector:
    """
    Adam on per-frame BCE with early stopping on frame AUROC. Validation windows are
    monitored when they hold both classes, otherwise the training windows are.
    The best parameters seen are restored at the end.
    """
    if not train_windows:
        raise ValueError("training needs at least one window")
    x_train, y_train = _tensors(train_windows, config.input_mode)
    monitor = "validation"
    if valid_windows:
        x_mon, y_mon = _tensors(valid_windows, config.input_mode)
    if not valid_windows or torch.unique(y_mon).numel() < 2:
        monitor = "train"
        x_mon, y_mon = x_train, y_train
        logger.info("Early stopping monitors training frame AUROC")

    detector = build_detector(config, rng)
    detector.train()
    optimizer = make_adam(
        detector.parameters(), AdamConfig(lr=config.lr, weight_decay=config.weight_decay)
    )
    loader = DataLoader(
        TensorDataset(x_train, y_train),
        batch_size=config.batch_size,
        shuffle=True,
        generator=rng.generator,
    )

    result = TrainedDetector(detector, monitor=monitor)
    best_auroc, best_state, stale = -np.inf, copy.deepcopy(detector.state_dict()), 0
    name = f"train-{config.backbone.value}"
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        for epoch in tqdm(range(config.epochs), desc=name, disable=not progress, leave=False):
            total, count = 0.0, 0
            for batch_idx, (xb, yb) in enumerate(loader):
                loss = detector_loss(detector, xb, yb)
                if not is_finite(loss):
                    raise NonFiniteLossError(
                        f"non-finite detector loss at epoch {epoch}, batch {batch_idx}"
                    )
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                total += loss.item() * xb.shape[0]
                count += xb.shape[0]

            auroc = _frame_auroc(detector, x_mon, y_mon)
            result.history.append(DetectorEpoch(epoch, total / count, auroc))
            if auroc > best_auroc:
                best_auroc, best_state, stale = auroc, copy.deepcopy(detector.state_dict()), 0
                result.best_epoch = epoch
            else:
                stale += 1
            if config.log_interval and epoch % config.log_interval == 0:
                logger.info(
                    "%s epoch %d loss=%.4f %s_auroc=%.4f", name, epoch + 1, total / count, monitor, auroc
                )
            if stale >= config.patience:
                logger.info("Early stop at epoch %d, best epoch %d", epoch + 1, result.best_epoch + 1)
                break

    detector.load_state_dict(best_state)
    detector.eval()
    return result


def predict_sequence(
    detector: IntentDetector,
    record: SequenceRecord | np.ndarray,
    T: int | None = None,
    stride: int = DEFAULT_STRIDE,
) -> np.ndarray:
    """
    Per-frame probabilities over a whole record, averaging overlapping window outputs.
    Frames the stride leaves out (gaps when stride > T, or the tail) get an extra window
    starting at the first uncovered frame, clipped to the record end.
    """
    features = record.features if isinstance(record, SequenceRecord) else np.asarray(record)
    T = detector.config.window if T is None else T
    n = features.shape[0]
    if n < T:
        raise ValueError(f"record has {n} frames, fewer than the window length {T}")
    starts = window_starts(n, T, stride)
    seen = np.zeros(n, dtype=bool)
    for start in starts:
        seen[start : start + T] = True
    while not seen.all():
        start = min(int(np.argmin(seen)), n - T)
        starts.append(start)
        seen[start : start + T] = True
    starts.sort()

    x = select_features(np.stack([features[s : s + T] for s in starts]), detector.config.input_mode)
    detector.eval()
    with torch.no_grad():
        probs = detector_forward(detector, x).numpy()

    total = np.zeros(n)
    covered = np.zeros(n)
    for start, p in zip(starts, probs):
        total[start : start + T] += p
        covered[start : start + T] += 1
    return total / covered


def write_prediction_csv(record: SequenceRecord, probs: np.ndarray, path: Path) -> None:
    np.savetxt(
        path,
        np.column_stack([np.arange(len(record)), probs, record.labels]),
        delimiter=",",
        header="frame_index,probability,label",
        comments="",
        fmt=["%d", "%.10g", "%d"],
    )


def save_detector(detector: IntentDetector, path: Path) -> None:
    config = asdict(detector.config)
    config["backbone"] = detector.config.backbone.value
    config["input_mode"] = detector.config.input_mode.value
    torch.save(
        {
            "kind": CHECKPOINT_KIND,
            "backbone": detector.config.backbone.value,
            "config": config,
            "state_dict": detector.state_dict(),
        },
        path,
    )


def load_detector(path: Path) -> IntentDetector:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_KIND} checkpoint")
    try:
        detector = IntentDetector(DetectorConfig(**ckpt["config"])).to(DTYPE)
        detector.load_state_dict(ckpt["state_dict"])
    except (TypeError, ValueError, RuntimeError) as err:
        raise CheckpointError(f"{path}: incompatible checkpoint: {err}") from err
    detector.eval()
    return detector
