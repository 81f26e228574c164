"""Hyperparameter grid enumeration and selection by final training loss.

The full sweep crosses every supported learning rate, rank, alpha and
dropout — 6 x 3 x 3 x 2 = 108 combinations.  ``grid_search`` runs a
training function over the grid (sequentially by default, optionally
with a small worker pool), writes a tabular report of final losses,
and picks the argmin.  Exact ties go to the lower learning rate, then
to the smaller rank/alpha/dropout, so selection is a total order.

The training function is injectable, so the selection logic can be
exercised against a stubbed loss table without running real training.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

from .train import (
    ALLOWED_ALPHAS,
    ALLOWED_DROPOUTS,
    ALLOWED_LEARNING_RATES,
    ALLOWED_RANKS,
    ConfigError,
    TrainResult,
    TrainSpec,
    train_cpt_lora,
)

log = logging.getLogger(__name__)


def enumerate_grid(
    template: TrainSpec,
    learning_rates: Sequence[float] | None = None,
    ranks: Sequence[int] | None = None,
    alphas: Sequence[int] | None = None,
    dropouts: Sequence[float] | None = None,
) -> list[TrainSpec]:
    """All grid specs derived from ``template``, in deterministic order.

    Passing a subset for any axis narrows the sweep; values must still
    come from the supported sets.  Each spec's output directory is a
    unique subdirectory of the template's.
    """
    learning_rates = tuple(learning_rates or ALLOWED_LEARNING_RATES)
    ranks = tuple(ranks or ALLOWED_RANKS)
    alphas = tuple(alphas or ALLOWED_ALPHAS)
    dropouts = tuple(dropouts or ALLOWED_DROPOUTS)

    specs = []
    for lr in learning_rates:
        for rank in ranks:
            for alpha in alphas:
                for dropout in dropouts:
                    combo = replace(
                        template,
                        learning_rate=lr,
                        lora_rank=rank,
                        lora_alpha=alpha,
                        lora_dropout=dropout,
                        output_dir=str(
                            Path(template.output_dir)
                            / f"lr{lr:g}_r{rank}_a{alpha}_d{dropout:g}"
                        ),
                    )
                    combo.validate()
                    specs.append(combo)
    return specs


@dataclass
class GridResult:
    best: TrainSpec
    best_loss: float
    rows: list[tuple[TrainSpec, float]]
    report_path: Path | None


def _selection_key(spec: TrainSpec, loss: float) -> tuple:
    return (loss, spec.learning_rate, spec.lora_rank, spec.lora_alpha, spec.lora_dropout)


def write_grid_report(rows: list[tuple[TrainSpec, float]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["learning_rate\tlora_rank\tlora_alpha\tlora_dropout\tfinal_loss"]
    lines.extend(
        f"{s.learning_rate:g}\t{s.lora_rank}\t{s.lora_alpha}\t{s.lora_dropout:g}\t{loss:.6f}"
        for s, loss in rows
    )
    path.write_text("\n".join(lines) + "\n")
    return path


def grid_search(
    specs: list[TrainSpec],
    train_fn: Callable[[TrainSpec], TrainResult] = train_cpt_lora,
    report_path: str | Path | None = None,
    workers: int = 1,
) -> GridResult:
    """Train every spec and pick the one with the lowest final loss."""
    if not specs:
        raise ConfigError("grid is empty; nothing to search")
    if workers < 1:
        raise ConfigError(f"workers must be at least 1, got {workers}")

    def run(spec: TrainSpec) -> float:
        result = train_fn(spec)
        log.info("grid point %s -> final loss %.4f", spec.label, result.final_loss)
        return result.final_loss

    if workers == 1:
        finals = [run(spec) for spec in specs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            finals = list(pool.map(run, specs))

    rows = list(zip(specs, finals))
    best_spec, best_loss = min(rows, key=lambda pair: _selection_key(*pair))
    report = write_grid_report(rows, report_path) if report_path is not None else None
    return GridResult(best=best_spec, best_loss=best_loss, rows=rows, report_path=report)
