#!/usr/bin/env python3
"""
Write a synthetic approach dataset in the dataset file format,
for smoke runs of the pipeline without the recorded data.
"""
from pathlib import Path

import typer
from typing_extensions import Annotated

from hri_intent.data import Env, class_balance, save_dataset
from hri_intent.toydata import make_toy_dataset

app = typer.Typer()


@app.command()
def main(
    output: Annotated[Path, typer.Option(help="Dataset file to write (.jsonl)")],
    sequences: Annotated[int, typer.Option(help="Sequences per environment")] = 20,
    length: Annotated[int, typer.Option(help="Frames per sequence")] = 60,
    positive_fraction: Annotated[
        float, typer.Option(help="Share of sequences with an intent onset")
    ] = 0.5,
    env3: Annotated[bool, typer.Option(help="Also emit Env3 test sequences")] = True,
    seed: Annotated[int, typer.Option()] = 0,
):
    """Generate Env1 and Env2 (and optionally Env3) toy sequences"""
    envs = [Env.Env1, Env.Env2] + ([Env.Env3] if env3 else [])
    records = []
    for offset, env in enumerate(envs):
        records.extend(
            make_toy_dataset(sequences, length, positive_fraction, seed + offset, env=env)
        )

    output.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(records, output)
    for row in class_balance(records):
        typer.echo(str(row))


if __name__ == "__main__":
    app()
