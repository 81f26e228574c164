"""Continued pretraining of LoRA adapters from a declarative TrainSpec.

A spec names the base model, the corpus and triple files, the LoRA
hyperparameters (restricted to the supported sweep values) and the
output directory.  Training writes the adapter artifact plus a
``loss.csv`` with one row per epoch; row 0 is the evaluation loss
before any update, so "final < initial" can be read straight off the
file.  Runs with the same seed on the same machine reproduce the loss
curve.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import yaml
from torch import nn

from . import data as data_mod
from . import model as model_mod

log = logging.getLogger(__name__)

ALLOWED_LEARNING_RATES = (3e-3, 1e-3, 3e-4, 1e-4, 3e-5, 1e-5)
ALLOWED_RANKS = (4, 8, 16)
ALLOWED_ALPHAS = (8, 16, 32)
ALLOWED_DROPOUTS = (0.05, 0.1)


class ConfigError(ValueError):
    """Raised for an invalid or unreadable TrainSpec."""


class DivergenceError(RuntimeError):
    """Raised when the training loss stops being finite."""


@dataclass
class TrainSpec:
    """Everything one training run needs, ready to serialize as YAML."""

    base_model: str
    corpus_path: str
    triples_path: str
    output_dir: str
    learning_rate: float = 1e-3
    lora_rank: int = 16
    lora_alpha: int = 32
    lora_dropout: float = 0.05
    epochs: int = 30
    seed: int = 0
    batch_size: int = 8

    @property
    def label(self) -> str:
        return (
            f"lr={self.learning_rate:g} rank={self.lora_rank} "
            f"alpha={self.lora_alpha} dropout={self.lora_dropout:g}"
        )

    def validate(self) -> None:
        if self.learning_rate not in ALLOWED_LEARNING_RATES:
            raise ConfigError(
                f"learning_rate must be one of {sorted(ALLOWED_LEARNING_RATES)}, "
                f"got {self.learning_rate!r}"
            )
        if self.lora_rank not in ALLOWED_RANKS:
            raise ConfigError(
                f"lora_rank must be one of {list(ALLOWED_RANKS)}, got {self.lora_rank!r}"
            )
        if self.lora_alpha not in ALLOWED_ALPHAS:
            raise ConfigError(
                f"lora_alpha must be one of {list(ALLOWED_ALPHAS)}, got {self.lora_alpha!r}"
            )
        if self.lora_dropout not in ALLOWED_DROPOUTS:
            raise ConfigError(
                f"lora_dropout must be one of {list(ALLOWED_DROPOUTS)}, "
                f"got {self.lora_dropout!r}"
            )
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size}")


def load_train_spec(path: str | Path) -> TrainSpec:
    """Read a TrainSpec from a YAML mapping file."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"spec file must hold a mapping: {path}")
    known = {f.name for f in TrainSpec.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown spec keys {unknown}; known keys: {sorted(known)}")
    required = ("base_model", "corpus_path", "triples_path", "output_dir")
    missing = sorted(k for k in required if k not in raw)
    if missing:
        raise ConfigError(f"spec file missing required keys {missing}")
    try:
        spec = TrainSpec(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad spec file {path}: {exc}") from exc
    spec.validate()
    return spec


def save_train_spec(spec: TrainSpec, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(asdict(spec), sort_keys=True))
    return path


@dataclass
class TrainResult:
    losses: list[float]
    adapter_dir: Path
    loss_path: Path
    spec: TrainSpec = field(repr=False)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


# ---------------------------------------------------------------------------
# batching


def _encode_records(records: list[str], vocab: data_mod.Vocab, max_len: int) -> list[list[int]]:
    encoded = []
    for record in records:
        ids = vocab.encode(record, add_bos=True, add_eos=True)
        encoded.append(ids[:max_len])
    return encoded


def _pad_batch(batch: list[list[int]], pad_id: int) -> torch.Tensor:
    width = max(len(ids) for ids in batch)
    rows = [ids + [pad_id] * (width - len(ids)) for ids in batch]
    return torch.tensor(rows, dtype=torch.long)


def _batch_loss(model: nn.Module, batch: torch.Tensor, pad_id: int) -> torch.Tensor:
    inputs, targets = batch[:, :-1], batch[:, 1:]
    logits = model(inputs)
    return nn.functional.cross_entropy(
        logits.reshape(-1, logits.size(-1)),
        targets.reshape(-1),
        ignore_index=pad_id,
    )


@torch.no_grad()
def _eval_loss(
    model: nn.Module, encoded: list[list[int]], pad_id: int, batch_size: int
) -> float:
    model.eval()
    total, count = 0.0, 0
    for start in range(0, len(encoded), batch_size):
        batch = _pad_batch(encoded[start : start + batch_size], pad_id)
        total += float(_batch_loss(model, batch, pad_id).item())
        count += 1
    return total / max(count, 1)


def _write_loss_csv(path: Path, losses: list[float]) -> None:
    lines = ["epoch,loss"]
    lines.extend(f"{epoch},{loss:.6f}" for epoch, loss in enumerate(losses))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# training loops


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    torch.manual_seed(seed)


def train_cpt_lora(spec: TrainSpec) -> TrainResult:
    """Continue pretraining a LoRA adapter per ``spec``.

    Loads the frozen base, wraps its linear layers with adapters, and
    trains on the linearized corpus + triples.  Writes the adapter and
    ``loss.csv`` under ``spec.output_dir``.
    """
    spec.validate()
    _seed_everything(spec.seed)
    model, vocab = model_mod.load_base(spec.base_model)
    docs = data_mod.load_corpus_file(spec.corpus_path)
    triples = data_mod.load_triples_file(spec.triples_path)
    records = data_mod.linearize_training_data(docs, triples)
    encoded = _encode_records(records, vocab, model.cfg.max_len)
    pad_id = vocab.pad_id

    model_mod.apply_lora(model, spec.lora_rank, spec.lora_alpha, spec.lora_dropout)
    optimizer = torch.optim.Adam(model_mod.lora_parameters(model), lr=spec.learning_rate)

    losses = [_eval_loss(model, encoded, pad_id, spec.batch_size)]
    order = list(range(len(encoded)))
    shuffler = random.Random(spec.seed)
    for epoch in range(1, spec.epochs + 1):
        model.train()
        shuffler.shuffle(order)
        total, count = 0.0, 0
        for start in range(0, len(order), spec.batch_size):
            batch = _pad_batch([encoded[i] for i in order[start : start + spec.batch_size]], pad_id)
            loss = _batch_loss(model, batch, pad_id)
            _check_finite(loss, spec, epoch)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += float(loss.item())
            count += 1
        losses.append(total / max(count, 1))
        log.debug("epoch %d loss %.4f (%s)", epoch, losses[-1], spec.label)

    out_dir = Path(spec.output_dir)
    adapter_dir = model_mod.save_adapter(
        model,
        out_dir,
        base_dir=spec.base_model,
        rank=spec.lora_rank,
        alpha=spec.lora_alpha,
        dropout=spec.lora_dropout,
        extra={"epochs": spec.epochs, "seed": spec.seed, "final_loss": losses[-1]},
    )
    loss_path = out_dir / "loss.csv"
    _write_loss_csv(loss_path, losses)
    return TrainResult(losses=losses, adapter_dir=adapter_dir, loss_path=loss_path, spec=spec)


def _check_finite(loss: torch.Tensor, spec: TrainSpec, epoch: int) -> None:
    value = float(loss.item())
    if math.isnan(value) or math.isinf(value):
        raise DivergenceError(
            f"training diverged at epoch {epoch} (loss={value}); spec: {spec.label}"
        )


# ---------------------------------------------------------------------------
# base model bootstrap


def build_toy_base(
    corpus_path: str | Path,
    triples_path: str | Path,
    out_dir: str | Path,
    *,
    d_model: int = 96,
    n_layers: int = 2,
    n_heads: int = 2,
    epochs: int = 30,
    learning_rate: float = 3e-3,
    batch_size: int = 8,
    seed: int = 0,
) -> tuple[Path, list[float]]:
    """Pretrain a small base LM for later adapter runs.

    The vocabulary covers the corpus *and* the triple store (the base
    tokenizer must know the domain's words), but full-weight training
    sees only the abstracts — the linearized triples stay unseen, so
    continued pretraining is what injects them.
    """
    _seed_everything(seed)
    docs = data_mod.load_corpus_file(corpus_path)
    triples = data_mod.load_triples_file(triples_path)
    all_records = data_mod.linearize_training_data(docs, triples)
    vocab = data_mod.Vocab.build(all_records)

    abstracts = [doc.abstract for doc in sorted(docs, key=lambda d: d.id)]
    max_needed = max(len(data_mod.tokenize(a)) for a in abstracts) + 8
    cfg = model_mod.ModelConfig(
        vocab_size=len(vocab),
        d_model=d_model,
        n_heads=n_heads,
        n_layers=n_layers,
        d_ff=2 * d_model,
        max_len=max(64, max_needed),
    )
    model = model_mod.TinyCausalLM(cfg)
    encoded = _encode_records(abstracts, vocab, cfg.max_len)
    pad_id = vocab.pad_id
    optimizer = torch.optim.Adam(model.parameters(), lr=learning_rate)

    losses = [_eval_loss(model, encoded, pad_id, batch_size)]
    order = list(range(len(encoded)))
    shuffler = random.Random(seed)
    for epoch in range(1, epochs + 1):
        model.train()
        shuffler.shuffle(order)
        total, count = 0.0, 0
        for start in range(0, len(order), batch_size):
            batch = _pad_batch([encoded[i] for i in order[start : start + batch_size]], pad_id)
            loss = _batch_loss(model, batch, pad_id)
            value = float(loss.item())
            if math.isnan(value) or math.isinf(value):
                raise DivergenceError(f"base pretraining diverged at epoch {epoch} (loss={value})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            total += value
            count += 1
        losses.append(total / max(count, 1))
    model.eval()
    base_dir = model_mod.save_base(model, vocab, out_dir)
    _write_loss_csv(Path(out_dir) / "base_loss.csv", losses)
    return base_dir, losses


def spec_variant(spec: TrainSpec, **overrides) -> TrainSpec:
    """A copy of ``spec`` with some fields replaced (used by the grid)."""
    return replace(spec, **overrides)
