"""
Multimodal recurrent VAE over pose + emotion + label windows.

The encoder maps frames 1..T-1 through a per-frame MLP and a GRU to one sequence-level
Gaussian posterior. The decoder GRU starts from a learned map of z, receives z with the
projected previous frame at every step and predicts the next frame (linear pose, softmax
emotion, sigmoid label). Training mixes ground truth and fed-back predictions with a
linearly annealed teacher-forcing probability.
"""
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn
from torch.utils.data import DataLoader, TensorDataset
from tqdm import tqdm

from .data import Env, SequenceRecord, Standardizer, WindowSample, stack_windows
from .features import (
    CONF_COLUMNS,
    EMOTION_SLICE,
    FRAME_DIM,
    LABEL_INDEX,
    N_KEYPOINTS,
    POSE_DIM,
    POSE_SLICE,
)
from .numerics import (
    DTYPE,
    AdamConfig,
    Rng,
    check_width,
    concat,
    dropout,
    is_finite,
    make_adam,
    safe_log,
    softmax,
)

logger = logging.getLogger(__name__)

CHECKPOINT_KIND = "mintrvae"


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or Inf loss"""


class GenerationError(RuntimeError):
    """Generation could not produce the requested windows"""


class CheckpointError(ValueError):
    """Checkpoint does not match the expected model kind or configuration"""


@dataclass(frozen=True)
class RvaeHyper:
    lambda_pose: float = 20.0
    lambda_emotion: float = 10.0
    lambda_label: float = 1.0
    beta_max: float = 0.8
    warmup_epochs: int = 5000
    free_bits: float = 0.1
    confidence_floor: float = 0.1
    huber_delta: float = 1.0
    latent_dim: int = 32
    mlp_dims: tuple[int, ...] = (256, 128, 64)
    hidden_dim: int = 128
    pose_coord_weight: float = 0.8
    pose_conf_weight: float = 0.2
    batch_size: int = 64
    epochs: int = 700
    lr: float = 1e-3
    weight_decay: float = 1e-5
    dropout: float = 0.2
    log_interval: int = 50

    def __post_init__(self) -> None:
        object.__setattr__(self, "mlp_dims", tuple(int(d) for d in self.mlp_dims))
        weights = [self.lambda_pose, self.lambda_emotion, self.lambda_label, self.beta_max]
        if min(weights) < 0 or self.free_bits < 0 or self.confidence_floor < 0:
            raise ValueError("loss weights, free-bits floor and confidence floor must be >= 0")
        if self.latent_dim < 1 or self.hidden_dim < 1 or not self.mlp_dims:
            raise ValueError("latent_dim, hidden_dim and mlp_dims must be positive")
        if abs(self.pose_coord_weight + self.pose_conf_weight - 1.0) > 1e-12:
            raise ValueError("pose_coord_weight + pose_conf_weight must equal 1")
        if self.huber_delta <= 0 or not 0.0 <= self.dropout < 1.0:
            raise ValueError("huber_delta must be > 0 and dropout in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup_epochs < 0:
            raise ValueError("epochs and batch_size must be >= 1, warmup_epochs >= 0")

    def scaled(self, factor: float) -> "RvaeHyper":
        """Shrink or grow the epoch budget, keeping the schedule shapes"""
        return replace(
            self,
            epochs=max(1, round(self.epochs * factor)),
            warmup_epochs=max(1, round(self.warmup_epochs * factor)),
        )


# --- Schedules ---


def beta_schedule(epoch: int, beta_max: float = 0.8, warmup_epochs: int = 5000) -> float:
    """Linear KL warm-up: beta_max * min(epoch / E_warm, 1)"""
    assert epoch >= 0
    if warmup_epochs <= 0:
        return beta_max
    return beta_max * min(epoch / warmup_epochs, 1.0)


def teacher_forcing_ratio(epoch: int, total_epochs: int) -> float:
    """Linear anneal from 1 at the first epoch to 0 at the last"""
    if total_epochs <= 1:
        return 1.0
    return min(1.0, max(0.0, 1.0 - epoch / (total_epochs - 1)))


def teacher_forcing_select(x_truth: Tensor, x_pred: Tensor, tau: float, rng: Rng) -> Tensor:
    """Per-sample coin flip: ground truth with probability tau, else the fed-back prediction"""
    assert 0.0 <= tau <= 1.0
    batch = x_truth.shape[0] if x_truth.dim() > 1 else 1
    keep = rng.bernoulli(tau, batch, 1).bool()
    if x_truth.dim() == 1:
        keep = keep.view(-1)
    return torch.where(keep, x_truth, x_pred)


# --- Losses ---


def huber(residual: Tensor, delta: float = 1.0) -> Tensor:
    """Huber on the vector norm of the last axis: |r|^2 / 2d inside d, |r| - d/2 outside"""
    assert delta > 0
    sq = (residual * residual).sum(dim=-1)
    quadratic = sq / (2 * delta)
    # clamp keeps the sqrt gradient finite on the unused branch
    linear = torch.sqrt(torch.clamp(sq, min=delta * delta)) - delta / 2
    return torch.where(sq <= delta * delta, quadratic, linear)


def pose_loss(
    pred_pose: Tensor,
    target_pose: Tensor,
    confidence_floor: float = 0.1,
    delta: float = 1.0,
    coord_weight: float = 0.8,
    conf_weight: float = 0.2,
) -> Tensor:
    """
    coord_weight * mean over frames of sum_j (c_j + nu) * huber(xy residual of joint j)
    + conf_weight * MSE(predicted confidences, target confidences).
    Target confidences are read from the target pose.
    """
    check_width(pred_pose, POSE_DIM, "pose_loss")
    pred = pred_pose.reshape(*pred_pose.shape[:-1], N_KEYPOINTS, 3)
    target = target_pose.reshape(*target_pose.shape[:-1], N_KEYPOINTS, 3)
    target_conf = target[..., 2]
    per_joint = (target_conf + confidence_floor) * huber(pred[..., :2] - target[..., :2], delta)
    coord_term = per_joint.sum(dim=-1).mean()
    conf_term = ((pred[..., 2] - target_conf) ** 2).mean()
    return coord_weight * coord_term + conf_weight * conf_term


def emotion_loss(pred_emotion: Tensor, target_emotion: Tensor) -> Tensor:
    """Mean over frames of KL(target || prediction); zero target entries contribute 0"""
    kl = torch.xlogy(target_emotion, target_emotion) - target_emotion * safe_log(pred_emotion)
    return kl.sum(dim=-1).mean()


def label_loss(pred_label: Tensor, target_label: Tensor) -> Tensor:
    bce = -(target_label * safe_log(pred_label) + (1 - target_label) * safe_log(1 - pred_label))
    return bce.mean()


def kl_free_bits(mu: Tensor, logvar: Tensor, free_bits: float = 0.1) -> Tensor:
    """Sum over latent dims of max(KL_q, floor); KL_q is averaged over the batch first"""
    kl = 0.5 * (mu * mu + torch.exp(logvar) - logvar - 1.0)
    if kl.dim() > 1:
        kl = kl.reshape(-1, kl.shape[-1]).mean(dim=0)
    return torch.clamp(kl, min=free_bits).sum()


@dataclass
class LossBreakdown:
    pose: Tensor | float
    emotion: Tensor | float
    label: Tensor | float
    kl: Tensor | float
    total: Tensor | float
    beta: float
    tau: float

    def item(self) -> "LossBreakdown":
        def f(x: Tensor | float) -> float:
            return float(x.item()) if isinstance(x, Tensor) else float(x)

        return LossBreakdown(
            f(self.pose), f(self.emotion), f(self.label), f(self.kl), f(self.total), self.beta, self.tau
        )

    def recomputed_total(self, hyper: RvaeHyper) -> float:
        v = self.item()
        return (
            hyper.lambda_pose * v.pose
            + hyper.lambda_emotion * v.emotion
            + hyper.lambda_label * v.label
            + v.beta * v.kl
        )


def compose_loss(
    pred: Tensor,
    target: Tensor,
    mu: Tensor,
    logvar: Tensor,
    hyper: RvaeHyper,
    beta: float,
    tau: float = 1.0,
) -> LossBreakdown:
    """Weighted pose + emotion + label + beta * free-bits KL on predicted next frames"""
    pose = pose_loss(
        pred[..., POSE_SLICE],
        target[..., POSE_SLICE],
        hyper.confidence_floor,
        hyper.huber_delta,
        hyper.pose_coord_weight,
        hyper.pose_conf_weight,
    )
    emotion = emotion_loss(pred[..., EMOTION_SLICE], target[..., EMOTION_SLICE])
    label = label_loss(pred[..., LABEL_INDEX], target[..., LABEL_INDEX])
    kl = kl_free_bits(mu, logvar, hyper.free_bits)
    total = (
        hyper.lambda_pose * pose
        + hyper.lambda_emotion * emotion
        + hyper.lambda_label * label
        + beta * kl
    )
    return LossBreakdown(pose, emotion, label, kl, total, beta, tau)


# --- Model ---


class FrameMLP(nn.Module):
    """Per-frame linear -> batch norm -> relu -> dropout stack"""

    def __init__(self, in_dim: int, dims: Sequence[int], dropout_rate: float) -> None:
        super().__init__()
        sizes = [in_dim, *dims]
        self.linears = nn.ModuleList(nn.Linear(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.norms = nn.ModuleList(nn.BatchNorm1d(b, momentum=0.1) for b in sizes[1:])
        self.dropout_rate = dropout_rate

    def forward(self, x: Tensor, rng: Rng | None) -> Tensor:
        for linear, norm in zip(self.linears, self.norms):
            x = dropout(torch.relu(norm(linear(x))), self.dropout_rate, rng, self.training)
        return x


class RvaeEncoder(nn.Module):
    def __init__(self, hyper: RvaeHyper) -> None:
        super().__init__()
        self.mlp = FrameMLP(FRAME_DIM, hyper.mlp_dims, hyper.dropout)
        self.gru = nn.GRU(hyper.mlp_dims[-1], hyper.hidden_dim, batch_first=True)
        self.mu = nn.Linear(hyper.hidden_dim, hyper.latent_dim)
        self.logvar = nn.Linear(hyper.hidden_dim, hyper.latent_dim)

    def forward(self, x: Tensor, rng: Rng | None = None) -> tuple[Tensor, Tensor]:
        check_width(x, FRAME_DIM, "encode")
        batch, steps, width = x.shape
        features = self.mlp(x.reshape(batch * steps, width), rng).reshape(batch, steps, -1)
        _, h_n = self.gru(features)
        return self.mu(h_n[-1]), self.logvar(h_n[-1])


def split_heads(raw: Tensor) -> Tensor:
    """Linear pose, softmax emotion, sigmoid label"""
    return concat(
        [
            raw[..., POSE_SLICE],
            softmax(raw[..., EMOTION_SLICE]),
            torch.sigmoid(raw[..., LABEL_INDEX : LABEL_INDEX + 1]),
        ]
    )


class RvaeDecoder(nn.Module):
    def __init__(self, hyper: RvaeHyper) -> None:
        super().__init__()
        projected = hyper.mlp_dims[-1]
        self.input_proj = nn.Linear(FRAME_DIM, projected)
        self.latent_to_hidden = nn.Linear(hyper.latent_dim, hyper.hidden_dim)
        self.cell = nn.GRUCell(projected + hyper.latent_dim, hyper.hidden_dim)
        self.output = nn.Sequential(
            nn.Linear(hyper.hidden_dim, hyper.hidden_dim),
            nn.ReLU(),
            nn.Linear(hyper.hidden_dim, FRAME_DIM),
        )

    def initial_state(self, z: Tensor) -> Tensor:
        return torch.tanh(self.latent_to_hidden(z))

    def forward(self, z: Tensor, x_tilde: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        projected = torch.relu(self.input_proj(x_tilde))
        h_next = self.cell(concat([projected, z]), h)
        return split_heads(self.output(h_next)), h_next


@dataclass
class Reconstruction:
    pred: Tensor
    mu: Tensor
    logvar: Tensor


class RvaeModel(nn.Module):
    def __init__(self, hyper: RvaeHyper) -> None:
        super().__init__()
        self.hyper = hyper
        self.encoder = RvaeEncoder(hyper)
        self.decoder = RvaeDecoder(hyper)

    def encode(self, window_input: Tensor, rng: Rng | None = None) -> tuple[Tensor, Tensor]:
        """(T-1, 59) or (B, T-1, 59) frames -> posterior mean and log-variance"""
        if window_input.dim() == 2:
            mu, logvar = self.encoder(window_input.unsqueeze(0), rng)
            return mu[0], logvar[0]
        return self.encoder(window_input, rng)

    @staticmethod
    def reparameterize(mu: Tensor, logvar: Tensor, rng: Rng) -> Tensor:
        """z = mu + exp(logvar / 2) * eps, eps drawn from rng"""
        eps = rng.normal(*mu.shape)
        return mu + torch.exp(0.5 * logvar) * eps

    def initial_state(self, z: Tensor) -> Tensor:
        return self.decoder.initial_state(z)

    def decode_step(self, z: Tensor, x_tilde: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        """One-step-ahead prediction of the next frame and the next hidden state"""
        check_width(x_tilde, FRAME_DIM, "decode_step")
        return self.decoder(z, x_tilde, h)

    def reconstruct(
        self, windows: Tensor, tau: float, rng: Rng, sample: bool = True
    ) -> Reconstruction:
        """
        Encode frames 1..T-1 and predict frames 2..T. The first decoder input is the real
        first frame; later inputs are chosen by teacher_forcing_select.
        """
        inputs = windows[:, :-1]
        mu, logvar = self.encode(inputs, rng)
        z = self.reparameterize(mu, logvar, rng) if sample else mu
        h = self.initial_state(z)
        x_tilde = inputs[:, 0]
        preds = []
        for k in range(inputs.shape[1]):
            x_hat, h = self.decode_step(z, x_tilde, h)
            preds.append(x_hat)
            if k + 1 < inputs.shape[1]:
                x_tilde = teacher_forcing_select(inputs[:, k + 1], x_hat, tau, rng)
        return Reconstruction(torch.stack(preds, dim=1), mu, logvar)


def total_loss(
    model: RvaeModel, windows: Tensor, hyper: RvaeHyper, beta: float, tau: float, rng: Rng
) -> LossBreakdown:
    if windows.dim() == 2:
        windows = windows.unsqueeze(0)
    recon = model.reconstruct(windows, tau, rng)
    return compose_loss(recon.pred, windows[:, 1:], recon.mu, recon.logvar, hyper, beta, tau)


# --- Training ---


def build_model(hyper: RvaeHyper, rng: Rng) -> RvaeModel:
    """Parameter initialisation drawn from a seed taken off rng"""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(rng.next_seed())
        return RvaeModel(hyper).to(DTYPE)


@dataclass
class TrainedRvae:
    model: RvaeModel
    history: list[LossBreakdown] = field(default_factory=list)


def _weighted_mean(parts: list[tuple[LossBreakdown, int]], beta: float, tau: float) -> LossBreakdown:
    n = sum(size for _, size in parts)

    def avg(name: str) -> float:
        return sum(getattr(b, name) * size for b, size in parts) / n

    return LossBreakdown(avg("pose"), avg("emotion"), avg("label"), avg("kl"), avg("total"), beta, tau)


def train(
    dataset_windows: Sequence[WindowSample],
    hyper: RvaeHyper,
    rng: Rng,
    progress: bool = True,
) -> TrainedRvae:
    """Fit a model on standardized windows; history holds one LossBreakdown per epoch"""
    if not dataset_windows:
        raise ValueError("training needs at least one window")
    data = torch.as_tensor(stack_windows(dataset_windows), dtype=DTYPE)
    model = build_model(hyper, rng)
    model.train()
    optimizer = make_adam(model.parameters(), AdamConfig(hyper.lr, hyper.weight_decay))
    loader = DataLoader(
        TensorDataset(data), batch_size=hyper.batch_size, shuffle=True, generator=rng.generator
    )

    result = TrainedRvae(model)
    for epoch in tqdm(range(hyper.epochs), desc="train-vae", disable=not progress, leave=False):
        beta = beta_schedule(epoch, hyper.beta_max, hyper.warmup_epochs)
        tau = teacher_forcing_ratio(epoch, hyper.epochs)
        parts: list[tuple[LossBreakdown, int]] = []
        for batch_idx, (batch,) in enumerate(loader):
            breakdown = total_loss(model, batch, hyper, beta, tau, rng)
            if not is_finite(breakdown.total):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}: {breakdown.item()}"
                )
            optimizer.zero_grad()
            breakdown.total.backward()
            optimizer.step()
            parts.append((breakdown.item(), batch.shape[0]))
        result.history.append(_weighted_mean(parts, beta, tau))
        if hyper.log_interval and (epoch % hyper.log_interval == 0 or epoch == hyper.epochs - 1):
            h = result.history[-1]
            logger.info(
                "vae epoch %d/%d total=%.4f pose=%.4f emo=%.4f label=%.4f kl=%.4f beta=%.3f tau=%.3f",
                epoch + 1,
                hyper.epochs,
                h.total,
                h.pose,
                h.emotion,
                h.label,
                h.kl,
                beta,
                tau,
            )
    model.eval()
    return result


@dataclass(frozen=True)
class ReconstructionError:
    pose_mse: float
    emotion_kl: float


def reconstruction_error(model: RvaeModel, window: WindowSample | np.ndarray) -> ReconstructionError:
    """Teacher-forced, inference-mode reconstruction of one window using z = mu"""
    frames = window.frames if isinstance(window, WindowSample) else window
    x = torch.as_tensor(np.asarray(frames), dtype=DTYPE).unsqueeze(0)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        recon = model.reconstruct(x, tau=1.0, rng=Rng(0), sample=False)
    model.train(was_training)
    target = x[:, 1:]
    pose_mse = ((recon.pred[..., POSE_SLICE] - target[..., POSE_SLICE]) ** 2).mean()
    emo = emotion_loss(recon.pred[..., EMOTION_SLICE], target[..., EMOTION_SLICE])
    return ReconstructionError(float(pose_mse), float(emo))


def write_history_csv(history: Sequence[LossBreakdown], path: Path) -> None:
    rows = [
        [epoch, h.pose, h.emotion, h.label, h.kl, h.total, h.beta, h.tau]
        for epoch, h in enumerate(b.item() for b in history)
    ]
    np.savetxt(
        path,
        np.array(rows, dtype=np.float64).reshape(-1, 8),
        delimiter=",",
        header="epoch,pose,emotion,label,kl,total,beta,tau",
        comments="",
        fmt=["%d"] + ["%.10g"] * 7,
    )


# --- Generation ---


def _to_record(frames: np.ndarray, record_id: str, env: Env) -> SequenceRecord:
    frames = frames.copy()
    frames[:, CONF_COLUMNS] = np.clip(frames[:, CONF_COLUMNS], 0.0, 1.0)
    emotion = frames[:, EMOTION_SLICE]
    frames[:, EMOTION_SLICE] = emotion / emotion.sum(axis=1, keepdims=True)
    scores = frames[:, LABEL_INDEX].copy()
    frames[:, LABEL_INDEX] = (scores >= 0.5).astype(np.float64)
    return SequenceRecord(record_id, env, frames, label_scores=scores)


def generate(
    model: RvaeModel,
    n: int,
    T: int,
    rng: Rng,
    seed_frames: np.ndarray,
    env: Env = Env.Env1,
    id_prefix: str = "synthetic",
) -> list[SequenceRecord]:
    """
    Sample z from the prior and decode T frames autoregressively from a real seed frame
    drawn uniformly from seed_frames. Labels are binarized at 0.5, raw scores kept.
    """
    pool = torch.as_tensor(np.asarray(seed_frames), dtype=DTYPE)
    if pool.dim() != 2 or pool.shape[0] == 0:
        raise GenerationError(f"seed_frames must be a non-empty (M, {FRAME_DIM}) array")
    check_width(pool, FRAME_DIM, "generate")
    if n <= 0:
        return []
    was_training = model.training
    model.eval()
    with torch.no_grad():
        z = rng.normal(n, model.hyper.latent_dim)
        x = pool[rng.randint(pool.shape[0], n)]
        h = model.initial_state(z)
        steps = []
        for _ in range(T):
            x, h = model.decode_step(z, x, h)
            steps.append(x)
        frames = torch.stack(steps, dim=1).numpy()
    model.train(was_training)
    return [_to_record(frames[i], f"{id_prefix}_{i:05d}", env) for i in range(n)]


class MinorityGenerator:
    """
    Window generator for rebalancing: seeds from real minority-class frames and accepts a
    window only when at least min_positive of its binarized labels are positive.
    """

    def __init__(
        self,
        model: RvaeModel,
        seed_frames: np.ndarray,
        rng: Rng,
        T: int = 15,
        min_positive: int = 7,
        max_attempts: int = 20,
    ) -> None:
        self.model = model
        self.seed_frames = seed_frames
        self.rng = rng
        self.T = T
        self.min_positive = min_positive
        self.max_attempts = max_attempts
        self._drawn = 0

    def __call__(self, n: int) -> list[WindowSample]:
        accepted: list[WindowSample] = []
        for _ in range(self.max_attempts):
            missing = n - len(accepted)
            if missing <= 0:
                break
            batch = generate(
                self.model, missing, self.T, self.rng, self.seed_frames, id_prefix="synthetic"
            )
            for record in batch:
                self._drawn += 1
                if record.labels.sum() >= self.min_positive:
                    accepted.append(WindowSample(record.features, f"synthetic_{self._drawn:06d}"))
        if len(accepted) < n:
            raise GenerationError(
                f"only {len(accepted)} of {n} windows reached {self.min_positive} positive "
                f"labels within {self.max_attempts} attempts each"
            )
        return accepted[:n]


# --- Checkpoints ---


def save_model(model: RvaeModel, path: Path, standardizer: Standardizer | None = None) -> None:
    torch.save(
        {
            "kind": CHECKPOINT_KIND,
            "hyper": asdict(model.hyper),
            "state_dict": model.state_dict(),
            "standardizer": standardizer.to_dict() if standardizer is not None else None,
        },
        path,
    )


def load_model(path: Path) -> tuple[RvaeModel, Standardizer | None]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=True)
    if not isinstance(ckpt, dict) or ckpt.get("kind") != CHECKPOINT_KIND:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_KIND} checkpoint")
    try:
        model = RvaeModel(RvaeHyper(**ckpt["hyper"])).to(DTYPE)
        model.load_state_dict(ckpt["state_dict"])
    except (TypeError, ValueError, RuntimeError) as err:
        raise CheckpointError(f"{path}: incompatible checkpoint: {err}") from err
    model.eval()
    s = ckpt.get("standardizer")
    return model, Standardizer.from_dict(s) if s is not None else None
