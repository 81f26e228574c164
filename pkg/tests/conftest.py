from __future__ import annotations

import json
from pathlib import Path

import pytest
import yaml

from insightpipe import cli, synth

GOLDEN_DIR = Path(__file__).parent / "golden"

# Fixed fixture fills for the rendered-prompt goldens, one entry per
# template role (shared by the unit tests and the acceptance gate).
PROMPT_FIXTURES = {
    "identifier": ("What are the datasets used by SciBERT?",),
    "qa": ("What does AdamW optimize?",),
    "augmented_qa": ("What does AdamW optimize?", "AdamW optimizes → decoupled weight decay"),
    "matching": (
        "Paper about question answering over tables.",
        "Paper about semantic parsing for SQL.",
    ),
    "augmented_matching": (
        "Paper about question answering over tables.",
        "Paper about semantic parsing for SQL.",
        "tables relate to → SQL schemas",
    ),
    "insight_eval": ("SciBERT was trained on", "SciBERT is pretrained on"),
}


def run_cli(*argv: str) -> int:
    """Invoke the CLI in-process; fail the test on a non-zero exit."""
    code = cli.main(list(argv))
    assert code == 0, f"cli {argv} exited {code}"
    return code


def write_config(path: Path, config: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    return path


def build_world_dir(tmp: Path, n_docs: int = 40, seed: int = 0, **overrides) -> tuple[dict, Path]:
    """Write a synthetic world plus its run config under ``tmp``."""
    world = synth.build_oracle_world(n_docs=n_docs, seed=seed)
    paths = synth.write_world(world, tmp / "world")
    config = synth.make_run_config(paths, tmp / "out", **overrides)
    config_path = write_config(tmp / "config.yaml", config)
    return config, config_path


def load_metrics(out_dir: Path) -> list[dict]:
    return json.loads((out_dir / "report" / "metrics.json").read_text(encoding="utf-8"))


@pytest.fixture(scope="session")
def oracle_world():
    return synth.build_oracle_world(n_docs=60, seed=7)
