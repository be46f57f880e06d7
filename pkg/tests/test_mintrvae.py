import math

import numpy as np
import pytest
import torch

from helpers import make_frames, make_window
from hri_intent.data import (
    Standardizer,
    WindowSample,
    load_dataset,
    save_dataset,
    validate_features,
)
from hri_intent.detectors import DetectorConfig, IntentDetector, save_detector
from hri_intent.features import EMOTION_SLICE, FRAME_DIM, LABEL_INDEX, POSE_DIM
from hri_intent.mintrvae import (
    CheckpointError,
    GenerationError,
    MinorityGenerator,
    NonFiniteLossError,
    RvaeHyper,
    RvaeModel,
    beta_schedule,
    build_model,
    compose_loss,
    emotion_loss,
    generate,
    huber,
    kl_free_bits,
    label_loss,
    load_model,
    pose_loss,
    save_model,
    teacher_forcing_ratio,
    teacher_forcing_select,
    total_loss,
    train,
    write_history_csv,
)
from hri_intent.numerics import DTYPE, Rng, ShapeError, grad_check


def t(*values) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE)


# --- formulas ---


def test_huber_branches():
    assert huber(t(0.0, 0.0)).item() == 0.0
    assert huber(t(0.3, 0.4)).item() == pytest.approx(0.125, abs=1e-12)
    assert huber(t(0.0, 2.0)).item() == pytest.approx(1.5, abs=1e-12)


def single_joint_pose(residual: float, confidence: float) -> tuple[torch.Tensor, torch.Tensor]:
    target = torch.zeros(1, POSE_DIM, dtype=DTYPE)
    target[0, 2::3] = 0.5
    target[0, 2] = confidence
    pred = target.clone()
    pred[0, 0] += residual
    return pred, target


def test_pose_loss_examples():
    pred, target = single_joint_pose(0.0, 0.5)
    assert pose_loss(pred, target).item() == 0.0
    pred, target = single_joint_pose(0.5, 0.0)
    assert pose_loss(pred, target).item() == pytest.approx(0.01, abs=1e-12)
    pred, target = single_joint_pose(2.0, 1.0)
    assert pose_loss(pred, target).item() == pytest.approx(1.32, abs=1e-12)


def test_pose_loss_increases_with_confidence():
    losses = [pose_loss(*single_joint_pose(0.7, c)).item() for c in np.linspace(0, 1, 6)]
    assert all(b > a for a, b in zip(losses, losses[1:]))


def test_pose_loss_confidence_term():
    target = torch.zeros(2, POSE_DIM, dtype=DTYPE)
    pred = target.clone()
    pred[:, 2::3] = 0.5
    assert pose_loss(pred, target).item() == pytest.approx(0.2 * 0.25, abs=1e-12)


def test_emotion_loss_examples():
    e = softmax_rows(np.random.default_rng(0).normal(size=(3, 7)))
    assert emotion_loss(e, e).item() == pytest.approx(0.0, abs=1e-12)
    one_hot = torch.zeros(1, 7, dtype=DTYPE)
    one_hot[0, 3] = 1.0
    uniform = torch.full((1, 7), 1 / 7, dtype=DTYPE)
    assert emotion_loss(uniform, one_hot).item() == pytest.approx(math.log(7), abs=1e-12)


def softmax_rows(x: np.ndarray) -> torch.Tensor:
    return torch.softmax(torch.as_tensor(x, dtype=DTYPE), dim=-1)


def test_emotion_loss_non_negative():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a, b = softmax_rows(rng.normal(size=(1, 7)) * 3), softmax_rows(rng.normal(size=(1, 7)) * 3)
        assert emotion_loss(a, b).item() >= 0.0


def test_label_loss_examples():
    assert label_loss(t(1.0 - 1e-15), t(1.0)).item() == pytest.approx(0.0, abs=1e-12)
    assert label_loss(t(0.5), t(1.0)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert label_loss(t(0.5), t(0.0)).item() == pytest.approx(math.log(2), abs=1e-12)


def test_kl_free_bits_examples():
    zeros = torch.zeros(32, dtype=DTYPE)
    assert kl_free_bits(zeros, zeros).item() == pytest.approx(3.2, abs=1e-12)
    mu = zeros.clone()
    mu[0] = 1.0
    assert kl_free_bits(mu, zeros).item() == pytest.approx(3.6, abs=1e-12)
    rng = Rng(0)
    for _ in range(20):
        assert kl_free_bits(rng.normal(32), rng.normal(32)).item() >= 3.2 - 1e-12


def test_kl_free_bits_averages_over_batch_first():
    mu = torch.zeros(2, 32, dtype=DTYPE)
    mu[0, 0] = 2.0
    # batch-mean KL of dim 0 is (2 + 0) / 2 = 1
    assert kl_free_bits(mu, torch.zeros_like(mu)).item() == pytest.approx(1.0 + 3.1, abs=1e-12)


def test_beta_schedule():
    assert beta_schedule(0) == 0.0
    assert beta_schedule(2500) == pytest.approx(0.4, abs=1e-12)
    assert beta_schedule(10000) == pytest.approx(0.8, abs=1e-12)
    values = [beta_schedule(e) for e in range(0, 7000, 100)]
    assert all(b >= a for a, b in zip(values, values[1:])) and max(values) <= 0.8


def test_teacher_forcing_ratio():
    values = [teacher_forcing_ratio(e, 11) for e in range(11)]
    assert values[0] == 1.0 and values[-1] == 0.0
    assert all(b <= a for a, b in zip(values, values[1:]))
    assert teacher_forcing_ratio(0, 1) == 1.0


def test_teacher_forcing_select():
    truth = torch.ones(10_000, 3, dtype=DTYPE)
    pred = torch.zeros(10_000, 3, dtype=DTYPE)
    assert torch.equal(teacher_forcing_select(truth, pred, 1.0, Rng(0)), truth)
    assert torch.equal(teacher_forcing_select(truth, pred, 0.0, Rng(0)), pred)
    mixed = teacher_forcing_select(truth, pred, 0.5, Rng(0))
    assert torch.all(mixed.min(dim=1).values == mixed.max(dim=1).values)
    assert abs(mixed[:, 0].mean().item() - 0.5) < 0.02


# --- model ---


@pytest.fixture
def window_tensor() -> torch.Tensor:
    return torch.as_tensor(make_frames(np.r_[np.zeros(8), np.ones(7)], np.random.default_rng(0)))


def test_encode_shapes_and_determinism(window_tensor):
    model = build_model(RvaeHyper(), Rng(0)).eval()
    mu, logvar = model.encode(window_tensor[:-1])
    assert mu.shape == (32,) and logvar.shape == (32,)
    mu2, logvar2 = model.encode(window_tensor[:-1])
    assert torch.equal(mu, mu2) and torch.equal(logvar, logvar2)


def test_encode_zero_mu_head(window_tensor):
    model = build_model(RvaeHyper(), Rng(0)).eval()
    with torch.no_grad():
        model.encoder.mu.weight.zero_()
        model.encoder.mu.bias.zero_()
    mu, _ = model.encode(window_tensor[:-1])
    assert torch.equal(mu, torch.zeros(32, dtype=DTYPE))


def test_encode_rejects_wrong_width(small_hyper):
    model = build_model(small_hyper, Rng(0))
    with pytest.raises(ShapeError, match="encode"):
        model.encode(torch.zeros(14, 58, dtype=DTYPE))


def test_reparameterize():
    mu = t(0.5, -1.0)
    z = RvaeModel.reparameterize(mu, torch.full((2,), -60.0, dtype=DTYPE), Rng(0))
    assert torch.allclose(z, mu, atol=1e-12)
    eps = Rng(5).normal(2)
    z = RvaeModel.reparameterize(torch.zeros(2, dtype=DTYPE), torch.zeros(2, dtype=DTYPE), Rng(5))
    assert torch.equal(z, eps)


def test_reparameterize_gradient():
    mu = t(0.2, -0.3).requires_grad_(True)
    logvar = t(-0.5, 0.4).requires_grad_(True)

    def fn():
        return (RvaeModel.reparameterize(mu, logvar, Rng(3)) ** 2).sum()

    assert grad_check(fn, [mu, logvar]) < 1e-4


def test_decode_step_heads(small_hyper, window_tensor):
    model = build_model(small_hyper, Rng(0)).eval()
    z = Rng(1).normal(3, small_hyper.latent_dim)
    h = model.initial_state(z)
    x = window_tensor[:3]
    out, h_next = model.decode_step(z, x, h)
    assert out.shape == (3, FRAME_DIM) and h_next.shape == h.shape
    assert torch.allclose(out[:, EMOTION_SLICE].sum(-1), torch.ones(3, dtype=DTYPE), atol=1e-9)
    assert torch.all((out[:, LABEL_INDEX] > 0) & (out[:, LABEL_INDEX] < 1))
    again, _ = model.decode_step(z, x, h)
    assert torch.equal(out, again)


# --- losses on the model ---


def test_loss_breakdown_total(small_hyper, window_tensor):
    model = build_model(small_hyper, Rng(0))
    b = total_loss(model, window_tensor, small_hyper, beta=0.3, tau=0.6, rng=Rng(1))
    assert b.total.item() == pytest.approx(b.recomputed_total(small_hyper), abs=1e-9)
    for part in (b.pose, b.emotion, b.label, b.kl):
        assert part.item() >= 0.0


def test_perfect_reconstruction_leaves_free_bits():
    hyper = RvaeHyper()
    target = torch.as_tensor(make_frames([0, 1, 1], np.random.default_rng(2))).unsqueeze(0)
    zeros = torch.zeros(1, 32, dtype=DTYPE)
    b = compose_loss(target, target, zeros, zeros, hyper, beta=0.5)
    assert b.total.item() == pytest.approx(0.5 * 3.2, abs=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_total_loss_gradient(small_hyper, seed):
    model = build_model(small_hyper, Rng(seed))
    window = torch.as_tensor(make_frames([0, 1, 1], np.random.default_rng(seed)))

    def fn():
        return total_loss(model, window, small_hyper, beta=0.4, tau=0.5, rng=Rng(seed + 10)).total

    params = [p for p in model.parameters()]
    assert grad_check(fn, params, max_entries=6, rng=Rng(seed)) < 1e-4


@pytest.mark.parametrize(
    "term",
    [
        lambda p, tgt: pose_loss(p[..., :POSE_DIM], tgt[..., :POSE_DIM], 0.1, 1.0, 1.0, 0.0),
        lambda p, tgt: pose_loss(p[..., :POSE_DIM], tgt[..., :POSE_DIM], 0.1, 1.0, 0.0, 1.0),
        lambda p, tgt: emotion_loss(softmax_rows(p[..., EMOTION_SLICE]), tgt[..., EMOTION_SLICE]),
        lambda p, tgt: label_loss(torch.sigmoid(p[..., LABEL_INDEX]), tgt[..., LABEL_INDEX]),
        lambda p, tgt: kl_free_bits(p[..., :8], p[..., 8:16], 0.0),
    ],
    ids=["huber_pose", "confidence_mse", "emotion_kl", "label_bce", "free_bits_kl"],
)
def test_loss_term_gradients(term):
    target = torch.as_tensor(make_frames([0, 1, 1, 0], np.random.default_rng(4)))
    for point in range(10):
        pred = (Rng(point).normal(4, FRAME_DIM) * 0.8).requires_grad_(True)
        assert grad_check(lambda: term(pred, target), [pred], max_entries=20, rng=Rng(point)) < 1e-4


# --- training ---


def training_windows(n: int = 6) -> list[WindowSample]:
    return [make_window(np.r_[np.zeros(7), np.ones(8)], seed=i) for i in range(n)]


def test_train_history_and_determinism(small_hyper):
    a = train(training_windows(), small_hyper, Rng(0), progress=False)
    b = train(training_windows(), small_hyper, Rng(0), progress=False)
    assert len(a.history) == small_hyper.epochs
    for pa, pb in zip(a.model.state_dict().values(), b.model.state_dict().values()):
        assert torch.equal(pa, pb)
    assert [h.tau for h in a.history] == [1.0, 0.5, 0.0]
    assert a.history[0].beta == 0.0
    for h in a.history:
        assert h.total == pytest.approx(h.recomputed_total(small_hyper), abs=1e-9)


def test_train_aborts_on_non_finite_loss(small_hyper):
    frames = make_frames(np.zeros(15))
    frames[3, 0] = np.nan
    with pytest.raises(NonFiniteLossError, match="epoch 0, batch 0"):
        train([WindowSample(frames)], small_hyper, Rng(0), progress=False)


def test_write_history_csv(small_hyper, tmp_path):
    trained = train(training_windows(), small_hyper, Rng(0), progress=False)
    write_history_csv(trained.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,pose,emotion,label,kl,total,beta,tau"
    assert len(lines) == 1 + small_hyper.epochs


# --- generation ---


@pytest.fixture
def trained_small(small_hyper):
    return train(training_windows(), small_hyper, Rng(0), progress=False).model


def test_generate_shapes_and_validity(trained_small):
    seeds = make_frames(np.ones(5), np.random.default_rng(0))
    records = generate(trained_small, 5, 15, Rng(0), seeds)
    assert len(records) == 5
    for r in records:
        assert r.features.shape == (15, FRAME_DIM)
        validate_features(r.features)
        assert set(np.unique(r.labels)) <= {0, 1}
        assert np.array_equal(r.labels, (r.label_scores >= 0.5).astype(int))
        np.testing.assert_allclose(r.features[:, EMOTION_SLICE].sum(1), 1.0, atol=1e-6)


def test_generated_records_survive_dataset_file(trained_small, tmp_path):
    seeds = make_frames(np.ones(5), np.random.default_rng(1))
    records = generate(trained_small, 2, 15, Rng(3), seeds)
    save_dataset(records, tmp_path / "synthetic.jsonl")
    loaded = load_dataset(tmp_path / "synthetic.jsonl")
    assert loaded == records
    for before, after in zip(records, loaded):
        assert np.array_equal(after.label_scores, before.label_scores)


def test_generate_requires_seed_frames(trained_small):
    with pytest.raises(GenerationError):
        generate(trained_small, 3, 15, Rng(0), np.empty((0, FRAME_DIM)))


def test_minority_generator_accepts_and_gives_up(trained_small):
    seeds = make_frames(np.ones(5), np.random.default_rng(0))
    accept_all = MinorityGenerator(trained_small, seeds, Rng(0), min_positive=0)
    windows = accept_all(4)
    assert len(windows) == 4 and all(len(w) == 15 for w in windows)

    impossible = MinorityGenerator(trained_small, seeds, Rng(0), min_positive=16, max_attempts=2)
    with pytest.raises(GenerationError, match="2 attempts"):
        impossible(3)


def test_checkpoint_round_trip(trained_small, small_hyper, tmp_path):
    s = Standardizer(np.arange(34.0), np.ones(34))
    save_model(trained_small, tmp_path / "vae.pt", s)
    loaded, loaded_s = load_model(tmp_path / "vae.pt")
    assert loaded.hyper == small_hyper
    assert np.array_equal(loaded_s.mean, s.mean)

    z = Rng(0).normal(2, small_hyper.latent_dim)
    x = torch.as_tensor(make_frames([0, 1], np.random.default_rng(1)))
    trained_small.eval()
    expected, _ = trained_small.decode_step(z, x, trained_small.initial_state(z))
    actual, _ = loaded.decode_step(z, x, loaded.initial_state(z))
    assert torch.equal(expected, actual)
    w = x.new_tensor(make_frames(np.zeros(15), np.random.default_rng(2)))
    assert torch.equal(trained_small.encode(w)[0], loaded.encode(w)[0])


def test_checkpoint_kind_mismatch(tmp_path):
    save_detector(IntentDetector(DetectorConfig(hidden=8)).to(DTYPE), tmp_path / "det.pt")
    with pytest.raises(CheckpointError, match="mintrvae"):
        load_model(tmp_path / "det.pt")


def test_hyper_validation_and_scaling():
    with pytest.raises(ValueError):
        RvaeHyper(pose_coord_weight=0.7)
    scaled = RvaeHyper().scaled(0.1)
    assert (scaled.epochs, scaled.warmup_epochs) == (70, 500)
