"""Dense retrieval baseline: embeddings, exact top-k, retriever metrics.

Vectors are float64 and unit-normalized at embed time, so cosine
similarity is a dot product.  Ranking is exact (no approximate index)
with ties broken by ascending id, which makes every ranking a pure
function of (index, query).

Embedder endpoints:

* ``mock:hash``  — deterministic bag-of-words hashing into ``dim``
  buckets; needs no network and is stable across processes.
* ``mock:table`` — exact text-to-vector lookup, for tests.
* anything else — POSTed as an embeddings request over HTTP.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import string
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import requests

logger = logging.getLogger(__name__)

__all__ = [
    "RetrievalError",
    "EmbedderConfig",
    "VectorIndex",
    "RetrievalResult",
    "RetrieverReport",
    "embed",
    "build_index",
    "top_k",
    "save_index",
    "load_index",
    "eval_retriever",
]

GRANULARITIES = ("document", "triple")


class RetrievalError(ValueError):
    """Raised for embedding failures and malformed indexes."""


@dataclass
class EmbedderConfig:
    endpoint: str = "mock:hash"
    model_name: str = "hash"
    dim: int = 64
    batch_size: int = 32
    retry_limit: int = 2
    api_key_env: str = "LLM_API_KEY"
    table: dict[str, list[float]] = field(default_factory=dict)

    def identity(self) -> str:
        return f"{self.endpoint}|{self.model_name}|{self.dim}"


def _hash_tokens(text: str) -> list[str]:
    # Mirror the answer tokenizer: punctuation-edged variants of a word
    # must land in the same bucket ("model," vs "model").
    stripped = (token.strip(string.punctuation) for token in text.casefold().split())
    return [token for token in stripped if token]


def _hash_vector(text: str, dim: int) -> np.ndarray:
    vector = np.zeros(dim, dtype=np.float64)
    for token in _hash_tokens(text):
        digest = hashlib.md5(token.encode("utf-8")).digest()
        value = int.from_bytes(digest[:8], "big")
        index = value % dim
        sign = 1.0 if (value >> 63) & 1 == 0 else -1.0
        vector[index] += sign
    if not vector.any():
        vector[0] = 1.0
    return vector


def _http_embed(texts: list[str], config: EmbedderConfig) -> list[list[float]]:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.api_key_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    payload = {"model": config.model_name, "input": texts}
    last: Exception | None = None
    for attempt in range(config.retry_limit + 1):
        try:
            response = requests.post(config.endpoint, json=payload, headers=headers, timeout=120)
        except requests.RequestException as exc:
            last = exc
        else:
            if response.status_code == 200:
                data = response.json()
                return [row["embedding"] for row in data["data"]]
            last = RetrievalError(f"HTTP {response.status_code} from {config.endpoint}")
            if not (response.status_code == 429 or response.status_code >= 500):
                break
        if attempt < config.retry_limit:
            time.sleep(0.5 * (2**attempt))
    raise RetrievalError(f"embedding call failed after retries: {last}")


def embed(texts: list[str], config: EmbedderConfig) -> np.ndarray:
    """Embed texts to unit-normalized float64 rows, in order."""
    if config.dim < 1:
        raise RetrievalError(f"embedding dim must be positive, got {config.dim}")
    rows: list[np.ndarray] = []
    if config.endpoint == "mock:hash":
        rows = [_hash_vector(text, config.dim) for text in texts]
    elif config.endpoint == "mock:table":
        for text in texts:
            if text not in config.table:
                raise RetrievalError(f"no mock embedding for text {text[:60]!r}")
            rows.append(np.asarray(config.table[text], dtype=np.float64))
    else:
        for start in range(0, len(texts), max(1, config.batch_size)):
            batch = texts[start : start + config.batch_size]
            rows.extend(np.asarray(v, dtype=np.float64) for v in _http_embed(batch, config))
    if not rows:
        return np.zeros((0, config.dim), dtype=np.float64)
    matrix = np.vstack(rows)
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise RetrievalError("embedding produced a zero vector")
    return matrix / norms


@dataclass
class VectorIndex:
    """Exact-search index over one granularity of retrieval units."""

    granularity: str
    ids: list[str]
    vectors: np.ndarray
    payloads: list[str]
    embedder_id: str

    def __post_init__(self) -> None:
        if self.granularity not in GRANULARITIES:
            raise RetrievalError(f"unknown granularity {self.granularity!r}")
        if len(self.ids) != len(self.payloads) or len(self.ids) != self.vectors.shape[0]:
            raise RetrievalError("index ids, payloads, and vectors disagree in length")
        self._position = {unit_id: i for i, unit_id in enumerate(self.ids)}
        if len(self._position) != len(self.ids):
            raise RetrievalError("duplicate unit ids in index")

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def payload(self, unit_id: str) -> str:
        try:
            return self.payloads[self._position[unit_id]]
        except KeyError:
            raise RetrievalError(f"unknown unit id {unit_id!r}") from None

    def content_digest(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps([self.ids, self.payloads]).encode("utf-8"))
        digest.update(np.ascontiguousarray(self.vectors).tobytes())
        return digest.hexdigest()


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    granularity: str
    ranked: tuple[tuple[str, float], ...]


def build_index(
    units: list[tuple[str, str]], granularity: str, embedder: EmbedderConfig
) -> VectorIndex:
    """Embed ``(id, payload)`` units into an exact-search index."""
    ids = [unit_id for unit_id, _ in units]
    if len(set(ids)) != len(ids):
        seen: set[str] = set()
        for unit_id in ids:
            if unit_id in seen:
                raise RetrievalError(f"duplicate unit id {unit_id!r}")
            seen.add(unit_id)
    payloads = [payload for _, payload in units]
    vectors = embed(payloads, embedder)
    return VectorIndex(
        granularity=granularity,
        ids=ids,
        vectors=vectors,
        payloads=payloads,
        embedder_id=embedder.identity(),
    )


def top_k(index: VectorIndex, query: str, k: int, embedder: EmbedderConfig) -> RetrievalResult:
    """Exact cosine top-k; ties broken by ascending unit id."""
    if k < 1:
        raise RetrievalError(f"k must be at least 1, got {k}")
    if len(index) == 0:
        raise RetrievalError("cannot query an empty index")
    query_vec = embed([query], embedder)[0]
    if query_vec.shape[0] != index.dim:
        raise RetrievalError(
            f"query dim {query_vec.shape[0]} does not match index dim {index.dim}"
        )
    scores = index.vectors @ query_vec
    order = sorted(range(len(index)), key=lambda i: (-scores[i], index.ids[i]))
    ranked = tuple((index.ids[i], float(scores[i])) for i in order[:k])
    return RetrievalResult(query=query, granularity=index.granularity, ranked=ranked)


def _paths(path: str | Path) -> tuple[Path, Path]:
    base = Path(path)
    if base.suffix == ".npz":
        base = base.with_suffix("")
    return base.with_suffix(".npz"), Path(str(base) + ".manifest.json")


def save_index(index: VectorIndex, path: str | Path) -> Path:
    """Persist to ``<path>.npz`` plus a plain-text manifest sidecar."""
    data_path, manifest_file = _paths(path)
    data_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(
        data_path,
        vectors=index.vectors,
        ids=np.asarray(index.ids, dtype=object),
        payloads=np.asarray(index.payloads, dtype=object),
    )
    manifest = {
        "embedder_id": index.embedder_id,
        "granularity": index.granularity,
        "dim": index.dim,
        "count": len(index),
        "content_digest": index.content_digest(),
    }
    manifest_file.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", "utf-8")
    return data_path


def load_index(path: str | Path) -> VectorIndex:
    """Load a persisted index, verifying it against its manifest."""
    data_path, manifest_file = _paths(path)
    if not data_path.exists():
        raise RetrievalError(f"index file not found: {data_path}")
    if not manifest_file.exists():
        raise RetrievalError(f"index manifest not found: {manifest_file}")
    manifest = json.loads(manifest_file.read_text("utf-8"))
    with np.load(data_path, allow_pickle=True) as data:
        index = VectorIndex(
            granularity=manifest["granularity"],
            ids=[str(v) for v in data["ids"]],
            vectors=np.asarray(data["vectors"], dtype=np.float64),
            payloads=[str(v) for v in data["payloads"]],
            embedder_id=manifest["embedder_id"],
        )
    if index.content_digest() != manifest.get("content_digest"):
        raise RetrievalError(f"index {data_path} does not match its manifest digest")
    if len(index) != manifest.get("count") or index.dim != manifest.get("dim"):
        raise RetrievalError(f"index {data_path} shape disagrees with its manifest")
    return index


@dataclass(frozen=True)
class ItemRanks:
    item_id: str
    kind: str
    gold_docs: tuple[str, ...]
    ranks: tuple[int | None, ...]


@dataclass
class RetrieverReport:
    """Per-item gold ranks plus rank-based aggregates.

    Ranks are 1-based positions within the top ``k_max``; ``None``
    marks a gold that did not surface, contributing zero reciprocal
    rank.  Single-gold (deep) items aggregate to Hits@K / MRR,
    multi-gold items to their within-item averaged variants.
    """

    k_max: int
    items: list[ItemRanks]

    def _deep(self) -> list[ItemRanks]:
        return [item for item in self.items if len(item.gold_docs) == 1]

    def _multi(self) -> list[ItemRanks]:
        return [item for item in self.items if len(item.gold_docs) > 1]

    def hits_at(self, k: int) -> float:
        deep = self._deep()
        if not deep:
            return 0.0
        hits = sum(
            1 for item in deep if item.ranks[0] is not None and item.ranks[0] <= k
        )
        return hits / len(deep)

    def mrr(self) -> float:
        deep = self._deep()
        if not deep:
            return 0.0
        total = sum(1.0 / item.ranks[0] if item.ranks[0] is not None else 0.0 for item in deep)
        return total / len(deep)

    def avg_hits_at(self, k: int) -> float:
        multi = self._multi()
        if not multi:
            return 0.0
        total = 0.0
        for item in multi:
            within = sum(1 for r in item.ranks if r is not None and r <= k) / len(item.ranks)
            total += within
        return total / len(multi)

    def avg_mrr(self) -> float:
        multi = self._multi()
        if not multi:
            return 0.0
        total = 0.0
        for item in multi:
            within = sum(1.0 / r if r is not None else 0.0 for r in item.ranks) / len(item.ranks)
            total += within
        return total / len(multi)

    def summary(self, ks: tuple[int, ...] = (1, 5, 10, 20, 50)) -> dict:
        ks = tuple(k for k in ks if k <= self.k_max)
        out: dict = {"k_max": self.k_max, "n_single": len(self._deep()), "n_multi": len(self._multi())}
        if self._deep():
            out["hits"] = {str(k): self.hits_at(k) for k in ks}
            out["mrr"] = self.mrr()
        if self._multi():
            out["avg_hits"] = {str(k): self.avg_hits_at(k) for k in ks}
            out["avg_mrr"] = self.avg_mrr()
        return out


def unit_doc(unit_id: str) -> str:
    """The document a unit id refers to.

    Document units are named by their doc id; triple units are named
    ``"<doc>#<n>"`` so that retrieving a triple counts as retrieving
    the document it came from.
    """
    return unit_id.split("#", 1)[0]


def eval_retriever(bench, index: VectorIndex, embedder: EmbedderConfig, k_max: int = 50) -> RetrieverReport:
    """Rank each item's source documents for its question.

    Only question-bearing (deep/multi) items participate; gold
    positions beyond ``k_max`` count as misses.  A gold document's rank
    is the position of the first unit drawn from it.
    """
    if k_max < 1:
        raise RetrievalError(f"k_max must be at least 1, got {k_max}")
    rows: list[ItemRanks] = []
    for item in bench:
        if item.kind not in ("deep", "multi"):
            continue
        if not item.question:
            raise RetrievalError(f"item {item.id} has no question to retrieve for")
        result = top_k(index, item.question, min(k_max, len(index)), embedder)
        positions: dict[str, int] = {}
        for pos, (unit_id, _) in enumerate(result.ranked):
            positions.setdefault(unit_doc(unit_id), pos + 1)
        ranks = tuple(positions.get(doc_id) for doc_id in item.source_docs)
        rows.append(
            ItemRanks(item_id=item.id, kind=item.kind, gold_docs=tuple(item.source_docs), ranks=ranks)
        )
    return RetrieverReport(k_max=k_max, items=rows)
