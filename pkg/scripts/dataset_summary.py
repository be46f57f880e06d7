#!/usr/bin/env python3
"""
Class balance and window statistics of a dataset file.
"""
from pathlib import Path

import numpy as np
import typer
from typing_extensions import Annotated

from hri_intent.data import class_balance, load_dataset, window_sequences

app = typer.Typer()


@app.command()
def main(
    dataset: Annotated[Path, typer.Option(help="Dataset file, one JSON record per line")],
    window: Annotated[int, typer.Option(help="Window length in frames")] = 15,
    stride: Annotated[int, typer.Option(help="Window stride in frames")] = 5,
):
    """Print sequences, frames and intent share per environment plus window counts"""
    records = load_dataset(dataset)
    for row in class_balance(records):
        typer.echo(str(row))

    lengths = np.array([len(r) for r in records])
    typer.echo(
        f"Sequence length: min {lengths.min()}, median {int(np.median(lengths))}, "
        f"max {lengths.max()}"
    )
    onsets = [r.onset_index for r in records if r.has_positive]
    if onsets:
        typer.echo(f"Onset frame: median {int(np.median(onsets))} over {len(onsets)} sequences")

    windows = window_sequences(records, window, stride)
    typer.echo(
        f"Windows: {len(windows.windows):,} ({100 * windows.positive_fraction:.1f}% positive), "
        f"{len(windows.skipped_records)} records shorter than {window} frames"
    )


if __name__ == "__main__":
    app()
