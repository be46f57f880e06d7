"""
One function per pipeline stage. Every stage reads its declared inputs from the run
directory (or the dataset path), writes fixed-name outputs there and records the resolved
configuration next to them.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, save_config
from .data import (
    SequenceRecord,
    SplitError,
    Standardizer,
    WindowSample,
    class_balance,
    fit_standardizer,
    load_dataset,
    load_standardizer,
    rebalance,
    save_dataset,
    save_standardizer,
    split_by_env,
    stack_frames,
    standardize_records,
    stratified_kfold,
    two_split_heldout,
    window_sequences,
    write_window_index,
)
from .detectors import (
    IntentDetector,
    TrainedDetector,
    Variant,
    load_detector,
    predict_sequence,
    save_detector,
    train_detector,
    write_prediction_csv,
)
from .evaluation import (
    DiscriminativeResult,
    EvalReport,
    FoldMetrics,
    MetricError,
    default_threshold_grid,
    discriminative_score,
    evaluate_predictions,
    onset_aligned_trajectories,
    write_report,
)
from .features import LABEL_INDEX
from .mintrvae import (
    CheckpointError,
    GenerationError,
    MinorityGenerator,
    RvaeModel,
    generate,
    load_model,
    save_model,
    train,
    write_history_csv,
)
from .numerics import Rng

logger = logging.getLogger(__name__)

STANDARDIZED = "standardized.jsonl"
STANDARDIZER = "standardizer.json"
WINDOW_INDEX = "windows.csv"
SUMMARY = "summary.txt"
VAE_CHECKPOINT = "vae.pt"
VAE_HISTORY = "vae_history.csv"
SYNTHETIC = "synthetic.jsonl"
SYNTHETIC_BOX = "synthetic_box.jsonl"
DISCRIMINATIVE = "discriminative.txt"


def detector_checkpoint(variant: Variant) -> str:
    return f"detector_{variant.value}.pt"


def detector_history(variant: Variant) -> str:
    return f"detector_{variant.value}_history.csv"


def show_progress() -> bool:
    return logging.getLogger("hri_intent").getEffectiveLevel() <= logging.INFO


def _out_dir(cfg: RunConfig) -> Path:
    out = cfg.paths.out
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")
    return out


def _require_file(path: Path, produced_by: str) -> Path:
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found, run '{produced_by}' first")
    return path


def _raw_records(cfg: RunConfig) -> list[SequenceRecord]:
    if cfg.paths.dataset is None:
        raise ConfigError("paths.dataset is not set (use --dataset or the config file)")
    return load_dataset(cfg.paths.dataset)


def _standardized_records(cfg: RunConfig) -> list[SequenceRecord]:
    return load_dataset(_require_file(cfg.paths.out / STANDARDIZED, "preprocess"))


def minority_seed_frames(records: Sequence[SequenceRecord]) -> np.ndarray:
    """Real positive-labelled frames, the seeds for class-targeted generation"""
    frames = stack_frames(records)
    seeds = frames[frames[:, LABEL_INDEX] == 1]
    if seeds.shape[0] == 0:
        raise GenerationError("no positive frames to seed generation from")
    return seeds


def _long_enough(records: Sequence[SequenceRecord], window: int) -> list[SequenceRecord]:
    kept = [r for r in records if len(r) >= window]
    if len(kept) < len(records):
        logger.warning("Skipped %d records shorter than %d frames", len(records) - len(kept), window)
    return kept


# --- preprocess ---


def preprocess(cfg: RunConfig) -> list[str]:
    """
    Fit the standardizer on Env 1+2 frames (all frames when the file holds only Env 3),
    write the standardized dataset, sidecar, window index and class-balance summary.
    """
    records = _raw_records(cfg)
    out = _out_dir(cfg)
    env12, _ = split_by_env(records)
    standardizer = fit_standardizer(env12 or records)
    standardized = standardize_records(records, standardizer)
    save_dataset(standardized, out / STANDARDIZED)
    save_standardizer(standardizer, out / STANDARDIZER)

    windows = window_sequences(standardized, cfg.data.window, cfg.data.stride)
    write_window_index(windows.windows, out / WINDOW_INDEX)

    summary = [str(row) for row in class_balance(records)]
    summary.append(
        f"Windows: {len(windows.windows)} (T={cfg.data.window}, stride={cfg.data.stride}), "
        f"{100 * windows.positive_fraction:.1f}% positive, "
        f"{len(windows.skipped_records)} short records skipped"
    )
    with open(out / SUMMARY, "w", encoding="utf-8") as f:
        f.write("\n".join(summary) + "\n")
    return summary


# --- VAE stages ---


def fit_vae(cfg: RunConfig, windows: Sequence[WindowSample], rng: Rng) -> RvaeModel:
    trained = train(windows, cfg.scaled_vae, rng, progress=show_progress())
    return trained.model


def train_vae(cfg: RunConfig) -> Path:
    records = _standardized_records(cfg)
    standardizer = load_standardizer(_require_file(cfg.paths.out / STANDARDIZER, "preprocess"))
    out = _out_dir(cfg)
    env12, _ = split_by_env(records)
    windows = window_sequences(env12, cfg.data.window, cfg.data.stride).windows
    trained = train(windows, cfg.scaled_vae, Rng(cfg.seed), progress=show_progress())
    save_model(trained.model, out / VAE_CHECKPOINT, standardizer)
    write_history_csv(trained.history, out / VAE_HISTORY)
    logger.info("Trained VAE on %d windows for %d epochs", len(windows), len(trained.history))
    return out / VAE_CHECKPOINT


def generate_samples(
    cfg: RunConfig, n: int | None = None, box_space: bool = False
) -> list[SequenceRecord]:
    """
    Sequences seeded from real positive frames, kept in standardized space. With box_space
    a copy mapped back to box-normalized coordinates is written to synthetic_box.jsonl.
    """
    path = _require_file(cfg.paths.out / VAE_CHECKPOINT, "train-vae")
    model, standardizer = load_model(path)
    if box_space and standardizer is None:
        raise CheckpointError(f"{path} has no standardizer to map samples back to box space")
    records = _standardized_records(cfg)
    env12, _ = split_by_env(records)
    out = _out_dir(cfg)
    n = cfg.generation.n if n is None else n
    synthetic = generate(model, n, cfg.data.window, Rng(cfg.seed), minority_seed_frames(env12))
    save_dataset(synthetic, out / SYNTHETIC)
    if box_space:
        save_dataset(
            [r.with_features(standardizer.invert(r.features)) for r in synthetic],
            out / SYNTHETIC_BOX,
        )
    return synthetic


def discriminative(cfg: RunConfig) -> DiscriminativeResult:
    """Real positive windows against the same number of class-targeted generated windows"""
    model, _ = load_model(_require_file(cfg.paths.out / VAE_CHECKPOINT, "train-vae"))
    env12, _ = split_by_env(_standardized_records(cfg))
    real = [
        w
        for w in window_sequences(env12, cfg.data.window, cfg.data.stride).windows
        if w.window_label == 1
    ]
    if not real:
        raise MetricError("no positive real windows to compare against")
    rng = Rng(cfg.seed)
    generator = MinorityGenerator(
        model,
        minority_seed_frames(env12),
        rng.spawn(1),
        cfg.data.window,
        max_attempts=cfg.generation.max_attempts,
    )
    result = discriminative_score(real, generator(len(real)), rng, cfg.discriminator)
    out = _out_dir(cfg)
    with open(out / DISCRIMINATIVE, "w", encoding="utf-8") as f:
        f.write(f"real_windows={len(real)}\naccuracy={result.accuracy:.17g}\nD={result.score:.17g}\n")
    return result


# --- Detector stages ---


def train_variant(
    cfg: RunConfig,
    variant: Variant,
    train_records: Sequence[SequenceRecord],
    valid_records: Sequence[SequenceRecord] | None,
    rng: Rng,
    vae: RvaeModel | None = None,
) -> TrainedDetector:
    """Window the training records, rebalance for the augmented variant and fit a detector"""
    windows = window_sequences(train_records, cfg.data.window, cfg.data.stride).windows
    if variant.augmented:
        if vae is None:
            raise ValueError(f"variant {variant.value} needs a trained VAE")
        generator = MinorityGenerator(
            vae,
            minority_seed_frames(train_records),
            rng.spawn(1),
            cfg.data.window,
            max_attempts=cfg.generation.max_attempts,
        )
        windows = rebalance(windows, generator, cfg.data.target_positive_fraction)
    valid = (
        window_sequences(valid_records, cfg.data.window, cfg.data.stride).windows
        if valid_records
        else None
    )
    config = cfg.scaled_detector.for_variant(variant)
    return train_detector(config, windows, valid, rng.spawn(2), progress=show_progress())


def _write_detector_history(trained: TrainedDetector, path: Path) -> None:
    rows = [[h.epoch, h.loss, h.auroc] for h in trained.history]
    np.savetxt(
        path,
        np.array(rows, dtype=np.float64).reshape(-1, 3),
        delimiter=",",
        header=f"epoch,loss,{trained.monitor}_auroc",
        comments="",
        fmt=["%d", "%.10g", "%.10g"],
    )


def _development_split(
    cfg: RunConfig, records: Sequence[SequenceRecord]
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """Fold 0 of the stratified k-fold over Env 1+2, shared by train-detector and evaluate"""
    env12, _ = split_by_env(records)
    fold = stratified_kfold(env12, cfg.data.folds, cfg.seed)[0]
    return fold.train, fold.validation


@dataclass(frozen=True)
class DetectorRow:
    variant: Variant
    best_epoch: int
    auroc: float
    monitor: str

    def __str__(self) -> str:
        return (
            f"{self.variant.value:<15} best_epoch={self.best_epoch + 1:<5} "
            f"{self.monitor}_frame_auroc={self.auroc:.4f}"
        )


def train_detectors(cfg: RunConfig, variants: Sequence[Variant]) -> list[DetectorRow]:
    records = _standardized_records(cfg)
    train_records, valid_records = _development_split(cfg, records)
    vae = None
    if any(v.augmented for v in variants):
        vae, _ = load_model(_require_file(cfg.paths.out / VAE_CHECKPOINT, "train-vae"))
    out = _out_dir(cfg)

    rows = []
    for index, variant in enumerate(variants):
        trained = train_variant(
            cfg, variant, train_records, valid_records, Rng(cfg.seed).spawn(10 * index), vae
        )
        save_detector(trained.detector, out / detector_checkpoint(variant))
        _write_detector_history(trained, out / detector_history(variant))
        best = trained.history[trained.best_epoch]
        rows.append(DetectorRow(variant, trained.best_epoch, best.auroc, trained.monitor))
    return rows


def _predict_all(
    detector: IntentDetector, records: Sequence[SequenceRecord], cfg: RunConfig
) -> list[np.ndarray]:
    return [predict_sequence(detector, r, cfg.data.window, cfg.data.stride) for r in records]


def _report(
    cfg: RunConfig,
    name: str,
    folds: list[FoldMetrics],
    records: Sequence[SequenceRecord],
    probs: Sequence[np.ndarray],
) -> EvalReport:
    report = EvalReport(name, folds)
    try:
        report.onset = onset_aligned_trajectories(
            records, probs, cfg.evaluation.onset_before, cfg.evaluation.onset_after
        )
    except MetricError:
        logger.warning("%s: no onset records, onset trajectory skipped", name)
    return report


def evaluate(cfg: RunConfig, variant: Variant) -> EvalReport:
    """
    Score a trained detector on Env 3 when the dataset has it, otherwise on the
    development validation split.
    """
    detector = load_detector(
        _require_file(cfg.paths.out / detector_checkpoint(variant), "train-detector")
    )
    records = _standardized_records(cfg)
    _, env3 = split_by_env(records)
    test = env3 or _development_split(cfg, records)[1]
    test = _long_enough(test, cfg.data.window)

    out_dir = _out_dir(cfg) / "eval" / variant.value
    pred_dir = out_dir / "predictions"
    pred_dir.mkdir(parents=True, exist_ok=True)
    probs = _predict_all(detector, test, cfg)
    for record, p in zip(test, probs):
        write_prediction_csv(record, p, pred_dir / f"{record.id}.csv")

    grid = default_threshold_grid(cfg.evaluation.pr_points)
    fold = evaluate_predictions(test, probs, cfg.rule, cfg.data.stride, 0, grid)
    report = _report(cfg, variant.value, [fold], test, probs)
    write_report(report, out_dir)
    return report


# --- Protocols ---


def inner_validation_split(
    cfg: RunConfig, records: Sequence[SequenceRecord], index: int
) -> tuple[list[SequenceRecord], list[SequenceRecord]]:
    """
    Fold 0 of a stratified k-fold inside the training records, used for early stopping so
    the scored test records never pick the best epoch. Too few sequences for the split
    leave no validation records and training AUROC is monitored instead.
    """
    try:
        fold = stratified_kfold(records, cfg.data.folds, cfg.seed + index)[0]
    except SplitError as err:
        logger.warning("split %d: no inner validation split (%s), monitoring training", index, err)
        return list(records), []
    return fold.train, fold.validation


def _run_split(
    cfg: RunConfig,
    index: int,
    train_records: Sequence[SequenceRecord],
    test_records: Sequence[SequenceRecord],
    inner_validation: bool,
) -> dict[Variant, tuple[FoldMetrics, list[SequenceRecord], list[np.ndarray]]]:
    """
    Standardize with training statistics, fit the VAE once if an augmented variant is
    requested, then train and score every variant on the test records. With
    inner_validation, early stopping watches a split of the training records.
    """
    rng = Rng(cfg.seed + index)
    standardizer: Standardizer = fit_standardizer(train_records)
    train_std = standardize_records(train_records, standardizer)
    test_std = _long_enough(standardize_records(test_records, standardizer), cfg.data.window)
    valid_std: list[SequenceRecord] = []
    if inner_validation:
        train_std, valid_std = inner_validation_split(cfg, train_std, index)

    vae = None
    if any(v.augmented for v in cfg.variants):
        train_windows = window_sequences(train_std, cfg.data.window, cfg.data.stride).windows
        vae = fit_vae(cfg, train_windows, rng.spawn(1))

    grid = default_threshold_grid(cfg.evaluation.pr_points)
    results = {}
    for v_index, variant in enumerate(cfg.variants):
        trained = train_variant(
            cfg,
            variant,
            train_std,
            valid_std or None,
            rng.spawn(10 * (v_index + 1)),
            vae,
        )
        probs = _predict_all(trained.detector, test_std, cfg)
        try:
            fold = evaluate_predictions(test_std, probs, cfg.rule, cfg.data.stride, index, grid)
        except MetricError as err:
            raise MetricError(f"{variant.value}: {err}") from err
        results[variant] = (fold, test_std, probs)
        logger.info(
            "split %d %s frame_auroc=%.4f sequence_auroc=%.4f",
            index,
            variant.value,
            fold.frame.auroc,
            fold.sequence.auroc,
        )
    return results


def _collect(
    cfg: RunConfig, name: str, splits: list[dict], out_dir: Path
) -> dict[Variant, EvalReport]:
    reports = {}
    rows = []
    for variant in cfg.variants:
        folds = [s[variant][0] for s in splits]
        records = [r for s in splits for r in s[variant][1]]
        probs = [p for s in splits for p in s[variant][2]]
        report = _report(cfg, f"{name}/{variant.value}", folds, records, probs)
        write_report(report, out_dir / variant.value)
        reports[variant] = report
        for key, (mean, std) in report.aggregate().items():
            level, metric = key.split(".")
            rows.append(f"{variant.value},{level},{metric},{mean:.10g},{std:.10g}")
    with open(out_dir / "summary.csv", "w", encoding="utf-8") as f:
        f.write("variant,level,metric,mean,std\n")
        f.writelines(row + "\n" for row in rows)
    return reports


def crossval(cfg: RunConfig) -> dict[Variant, EvalReport]:
    """Stratified k-fold over Env 1+2, per-fold seed = seed + fold index"""
    env12, _ = split_by_env(_raw_records(cfg))
    folds = stratified_kfold(env12, cfg.data.folds, cfg.seed)
    out_dir = _out_dir(cfg) / "crossval"
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = [_run_split(cfg, f.index, f.train, f.validation, True) for f in folds]
    return _collect(cfg, "crossval", splits, out_dir)


def heldout_env3(cfg: RunConfig) -> dict[Variant, EvalReport]:
    """Train on each stratified half of Env 1+2, test both on the shared Env 3 records"""
    env12, env3 = split_by_env(_raw_records(cfg))
    if not env3:
        raise SplitError("dataset has no Env3 records for the held-out protocol")
    halves = two_split_heldout(env12, cfg.seed)
    out_dir = _out_dir(cfg) / "heldout_env3"
    out_dir.mkdir(parents=True, exist_ok=True)
    splits = [_run_split(cfg, i, half, env3, False) for i, half in enumerate(halves)]
    return _collect(cfg, "heldout_env3", splits, out_dir)
