"""Command line driver, one subcommand per pipeline stage"""
from pathlib import Path
from typing import Callable, List, Optional, TypeVar

import typer
from typing_extensions import Annotated

from . import pipeline, set_logging_level
from .config import ConfigError, RunConfig, load_config
from .data import DatasetFormatError, FrameValidationError, SplitError
from .detectors import Backbone, Variant
from .mintrvae import CheckpointError

app = typer.Typer(help="Intent detection with MINT-RVAE rebalancing", no_args_is_help=True)

T = TypeVar("T")

USAGE_ERRORS = (
    FileNotFoundError,
    ConfigError,
    DatasetFormatError,
    FrameValidationError,
    CheckpointError,
    SplitError,
)

ConfigOpt = Annotated[
    Optional[str], typer.Option("--config", help="YAML config file or preset name (reference, desk)")
]
DatasetOpt = Annotated[Optional[Path], typer.Option(help="Dataset file, one JSON record per line")]
SeedOpt = Annotated[Optional[int], typer.Option(help="Seed for splits, sampling and initialisation")]
OutOpt = Annotated[Optional[Path], typer.Option("--out", help="Run directory for stage outputs")]
ScaleOpt = Annotated[
    Optional[float], typer.Option(help="Multiplies training epochs and the KL warm-up")
]
BackboneOpt = Annotated[Optional[Backbone], typer.Option(help="Detector backbone")]
VariantOpt = Annotated[
    Optional[List[Variant]], typer.Option("--variant", help="Ablation row, repeatable")
]
LogLevelOpt = Annotated[str, typer.Option(help="Logging level")]


def _config(
    config: str | None,
    dataset: Path | None = None,
    seed: int | None = None,
    out: Path | None = None,
    scale: float | None = None,
    backbone: Backbone | None = None,
    log_level: str = "INFO",
) -> RunConfig:
    try:
        set_logging_level(log_level)
    except ValueError as err:
        raise ConfigError(f"invalid log level: {log_level}") from err
    return load_config(config).with_overrides(
        dataset=dataset, seed=seed, out=out, scale=scale, backbone=backbone
    )


def _run(stage: Callable[[], T]) -> T:
    """Exit 2 on usage, config or input errors and 1 on runtime failures"""
    try:
        return stage()
    except USAGE_ERRORS as err:
        typer.echo(f"error: {err}", err=True)
        raise typer.Exit(code=2) from err
    except (RuntimeError, ValueError) as err:
        typer.echo(f"failed: {err}", err=True)
        raise typer.Exit(code=1) from err


@app.command()
def preprocess(
    config: ConfigOpt = None,
    dataset: DatasetOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Standardize the dataset, write the sidecar and window index, print the class balance"""
    cfg = _run(lambda: _config(config, dataset, seed, out, None, None, log_level))
    summary = _run(lambda: pipeline.preprocess(cfg))
    for line in summary:
        typer.echo(line)


@app.command("train-vae")
def train_vae(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    scale: ScaleOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Train MINT-RVAE on the preprocessed Env 1+2 windows"""
    cfg = _run(lambda: _config(config, None, seed, out, scale, None, log_level))
    path = _run(lambda: pipeline.train_vae(cfg))
    typer.echo(f"Wrote {path}")


@app.command()
def generate(
    n: Annotated[Optional[int], typer.Option(help="Number of sequences")] = None,
    box_space: Annotated[
        bool, typer.Option(help="Also write a copy in box-normalized coordinates")
    ] = False,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Sample synthetic sequences from a trained checkpoint"""
    cfg = _run(lambda: _config(config, None, seed, out, None, None, log_level))
    records = _run(lambda: pipeline.generate_samples(cfg, n, box_space))
    positive = sum(r.has_positive for r in records)
    typer.echo(f"Generated {len(records)} sequences ({positive} with intent frames)")


@app.command("train-detector")
def train_detector(
    variant: VariantOpt = None,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    scale: ScaleOpt = None,
    backbone: BackboneOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Train one detector per requested variant (all configured variants by default)"""
    cfg = _run(lambda: _config(config, None, seed, out, scale, backbone, log_level))
    rows = _run(lambda: pipeline.train_detectors(cfg, variant or list(cfg.variants)))
    for row in rows:
        typer.echo(str(row))


@app.command()
def evaluate(
    variant: VariantOpt = None,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Score trained detectors and write reports under eval/<variant>"""
    cfg = _run(lambda: _config(config, None, seed, out, None, None, log_level))
    for v in variant or list(cfg.variants):
        report = _run(lambda: pipeline.evaluate(cfg, v))
        _echo_report(v, report.aggregate())


def _echo_report(variant: Variant, aggregate: dict[str, tuple[float, float]]) -> None:
    cells = " ".join(f"{key}={mean:.3f}±{std:.3f}" for key, (mean, std) in aggregate.items())
    typer.echo(f"{variant.value:<15} {cells}")


@app.command()
def crossval(
    config: ConfigOpt = None,
    dataset: DatasetOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    scale: ScaleOpt = None,
    backbone: BackboneOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Stratified k-fold cross-validation on Env 1+2 for every configured variant"""
    cfg = _run(lambda: _config(config, dataset, seed, out, scale, backbone, log_level))
    reports = _run(lambda: pipeline.crossval(cfg))
    for v, report in reports.items():
        _echo_report(v, report.aggregate())


@app.command("heldout-env3")
def heldout_env3(
    config: ConfigOpt = None,
    dataset: DatasetOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    scale: ScaleOpt = None,
    backbone: BackboneOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Two-split held-out protocol: train on each Env 1+2 half, test on Env 3"""
    cfg = _run(lambda: _config(config, dataset, seed, out, scale, backbone, log_level))
    reports = _run(lambda: pipeline.heldout_env3(cfg))
    for v, report in reports.items():
        _echo_report(v, report.aggregate())


@app.command("discriminative-score")
def discriminative_score(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    log_level: LogLevelOpt = "INFO",
):
    """Real-vs-synthetic classifier accuracy and D = |0.5 - accuracy|"""
    cfg = _run(lambda: _config(config, None, seed, out, None, None, log_level))
    result = _run(lambda: pipeline.discriminative(cfg))
    typer.echo(str(result))


if __name__ == "__main__":
    app()
