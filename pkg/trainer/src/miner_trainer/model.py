"""Tiny word-level causal LM and a LoRA wrapper for its linear layers.

The base model is deliberately small (two pre-LN transformer blocks)
so continued pretraining stays CPU-friendly.  LoRA is implemented
directly: every ``nn.Linear`` — attention projections, feed-forward
layers and the output head — is wrapped with a frozen base weight plus
a trainable ``(alpha / rank) * B @ A`` delta, with dropout on the
adapter input.  ``B`` starts at zero so a freshly wrapped model is
bit-identical to its base.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import Vocab


class AdapterError(RuntimeError):
    """Raised when an adapter artifact cannot be loaded or applied."""


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 96
    n_heads: int = 2
    n_layers: int = 2
    d_ff: int = 192
    max_len: int = 96


class LoRALinear(nn.Module):
    """A frozen linear layer plus a trainable low-rank delta."""

    def __init__(self, base: nn.Linear, rank: int, alpha: int, dropout: float):
        super().__init__()
        self.base = base
        for param in self.base.parameters():
            param.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        delta = F.linear(F.linear(self.dropout(x), self.lora_a), self.lora_b)
        return self.base(x) + delta * self.scaling


class _Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.q = nn.Linear(cfg.d_model, cfg.d_model)
        self.k = nn.Linear(cfg.d_model, cfg.d_model)
        self.v = nn.Linear(cfg.d_model, cfg.d_model)
        self.proj = nn.Linear(cfg.d_model, cfg.d_model)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.ff1 = nn.Linear(cfg.d_model, cfg.d_ff)
        self.ff2 = nn.Linear(cfg.d_ff, cfg.d_model)
        self.n_heads = cfg.n_heads

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        h = self.ln1(x)

        def split(m: torch.Tensor) -> torch.Tensor:
            return m.view(b, t, self.n_heads, d // self.n_heads).transpose(1, 2)

        attn = F.scaled_dot_product_attention(
            split(self.q(h)), split(self.k(h)), split(self.v(h)), is_causal=True
        )
        attn = attn.transpose(1, 2).reshape(b, t, d)
        x = x + self.proj(attn)
        h = self.ln2(x)
        return x + self.ff2(F.gelu(self.ff1(h)))


class TinyCausalLM(nn.Module):
    """Word-level decoder-only transformer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_len, cfg.d_model)
        self.blocks = nn.ModuleList(_Block(cfg) for _ in range(cfg.n_layers))
        self.ln_out = nn.LayerNorm(cfg.d_model)
        self.head = nn.Linear(cfg.d_model, cfg.vocab_size)

    def forward(self, ids: torch.Tensor) -> torch.Tensor:
        b, t = ids.shape
        if t > self.cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {self.cfg.max_len}")
        pos = torch.arange(t, device=ids.device)
        x = self.tok_emb(ids) + self.pos_emb(pos)[None, :, :]
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_out(x))


# ---------------------------------------------------------------------------
# LoRA application


def apply_lora(model: TinyCausalLM, rank: int, alpha: int, dropout: float) -> TinyCausalLM:
    """Freeze the model and wrap every linear layer with a LoRA delta."""
    for param in model.parameters():
        param.requires_grad_(False)

    def wrap(module: nn.Module) -> None:
        for name, child in list(module.named_children()):
            if isinstance(child, nn.Linear):
                setattr(module, name, LoRALinear(child, rank, alpha, dropout))
            else:
                wrap(child)

    wrap(model)
    return model


def lora_parameters(model: nn.Module):
    """Iterate only the trainable adapter parameters."""
    return (p for p in model.parameters() if p.requires_grad)


def lora_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {
        name: tensor
        for name, tensor in model.state_dict().items()
        if "lora_a" in name or "lora_b" in name
    }


def adapted_module_names(model: nn.Module) -> list[str]:
    return [name for name, mod in model.named_modules() if isinstance(mod, LoRALinear)]


# ---------------------------------------------------------------------------
# persistence

_BASE_WEIGHTS = "base.pt"
_BASE_CONFIG = "config.json"
_BASE_VOCAB = "vocab.json"
_ADAPTER_WEIGHTS = "adapter.pt"
_ADAPTER_MANIFEST = "manifest.json"


def _file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_base(model: TinyCausalLM, vocab: Vocab, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out_dir / _BASE_WEIGHTS)
    (out_dir / _BASE_CONFIG).write_text(json.dumps(asdict(model.cfg), indent=2))
    (out_dir / _BASE_VOCAB).write_text(vocab.to_json())
    return out_dir


def load_base(base_dir: str | Path) -> tuple[TinyCausalLM, Vocab]:
    base_dir = Path(base_dir)
    config_path = base_dir / _BASE_CONFIG
    if not config_path.exists():
        raise AdapterError(f"base model not found at {base_dir} (missing {_BASE_CONFIG})")
    cfg = ModelConfig(**json.loads(config_path.read_text()))
    vocab = Vocab.from_json((base_dir / _BASE_VOCAB).read_text())
    model = TinyCausalLM(cfg)
    state = torch.load(base_dir / _BASE_WEIGHTS, map_location="cpu", weights_only=True)
    model.load_state_dict(state)
    model.eval()
    return model, vocab


def save_adapter(
    model: nn.Module,
    out_dir: str | Path,
    *,
    base_dir: str | Path,
    rank: int,
    alpha: int,
    dropout: float,
    extra: dict | None = None,
) -> Path:
    """Persist only the LoRA weights plus a manifest describing them."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.save(lora_state_dict(model), out_dir / _ADAPTER_WEIGHTS)
    manifest = {
        "kind": "lora-adapter",
        "base_model": str(base_dir),
        "base_sha256": _file_sha256(Path(base_dir) / _BASE_WEIGHTS),
        "lora_rank": rank,
        "lora_alpha": alpha,
        "lora_dropout": dropout,
        "adapted_modules": adapted_module_names(model),
    }
    if extra:
        manifest.update(extra)
    (out_dir / _ADAPTER_MANIFEST).write_text(json.dumps(manifest, indent=2))
    return out_dir


def read_manifest(adapter_dir: str | Path) -> dict:
    manifest_path = Path(adapter_dir) / _ADAPTER_MANIFEST
    if not manifest_path.exists():
        raise AdapterError(f"adapter not found at {adapter_dir} (missing {_ADAPTER_MANIFEST})")
    return json.loads(manifest_path.read_text())


def load_adapter(
    adapter_dir: str | Path, base_dir: str | Path | None = None
) -> tuple[TinyCausalLM, Vocab]:
    """Rebuild base + adapter for inference.

    The manifest records which base the adapter was trained against; a
    different ``base_dir`` may be supplied (e.g. after moving artifacts)
    but its weights must hash to the same value.
    """
    adapter_dir = Path(adapter_dir)
    manifest = read_manifest(adapter_dir)
    base_dir = Path(base_dir) if base_dir is not None else Path(manifest["base_model"])
    model, vocab = load_base(base_dir)
    actual = _file_sha256(base_dir / _BASE_WEIGHTS)
    if actual != manifest["base_sha256"]:
        raise AdapterError(
            f"adapter at {adapter_dir} was trained against a different base "
            f"(weights hash {manifest['base_sha256'][:12]}.., found {actual[:12]}..)"
        )
    apply_lora(
        model,
        rank=int(manifest["lora_rank"]),
        alpha=int(manifest["lora_alpha"]),
        dropout=float(manifest["lora_dropout"]),
    )
    state = torch.load(adapter_dir / _ADAPTER_WEIGHTS, map_location="cpu", weights_only=True)
    missing, unexpected = model.load_state_dict(state, strict=False)
    if unexpected:
        raise AdapterError(f"adapter weights do not fit this base: unexpected {unexpected[:3]}")
    leftover = [name for name in missing if "lora_" in name]
    if leftover:
        raise AdapterError(f"adapter weights incomplete: missing {leftover[:3]}")
    model.eval()
    return model, vocab


# ---------------------------------------------------------------------------
# generation


@torch.no_grad()
def generate(
    model: TinyCausalLM,
    vocab: Vocab,
    prompt: str,
    max_new_tokens: int,
    temperature: float = 0.0,
    generator: torch.Generator | None = None,
) -> tuple[str, str]:
    """Complete ``prompt``; returns ``(completion_text, finish_reason)``.

    Greedy at temperature 0, otherwise softmax sampling.  Generation
    stops at ``<eos>``, a period token, or the token budget.  Only the
    completion (not the prompt) is returned.
    """
    model.eval()
    ids = vocab.encode(prompt, add_bos=True)
    window = model.cfg.max_len - 1
    out: list[int] = []
    stop_id = vocab.stoi.get(".")
    finish = "length"
    for _ in range(max_new_tokens):
        context = torch.tensor([(ids + out)[-window:]], dtype=torch.long)
        logits = model(context)[0, -1]
        if temperature and temperature > 0:
            probs = torch.softmax(logits / temperature, dim=-1)
            next_id = int(torch.multinomial(probs, 1, generator=generator).item())
        else:
            next_id = int(torch.argmax(logits).item())
        if next_id == vocab.eos_id:
            finish = "stop"
            break
        out.append(next_id)
        if stop_id is not None and next_id == stop_id:
            finish = "stop"
            break
    return vocab.decode(out), finish
