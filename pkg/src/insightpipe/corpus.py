"""Corpus loading and graph-based document sampling.

A corpus is a collection of paper abstracts connected by citation-worthy
pair edges.  The on-disk format is line-delimited JSON, one document per
line:

    {"id": "...", "title": "...", "abstract": "...", "neighbors": ["..."]}

Matching task files pair two document ids with a relevance label:

    {"doc_a": "...", "doc_b": "...", "label": true}
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger(__name__)

__all__ = [
    "CorpusError",
    "Document",
    "MatchingItem",
    "CorpusHandle",
    "ingest_corpus",
    "bfs_sample",
    "load_matching_pairs",
]


class CorpusError(ValueError):
    """Raised for malformed corpus or matching-pair files."""


@dataclass(frozen=True)
class Document:
    """One paper abstract plus its outgoing graph edges."""

    id: str
    title: str
    abstract: str
    neighbors: tuple[str, ...] = ()
    token_count: int = 0


@dataclass(frozen=True)
class MatchingItem:
    """A candidate citation pair with its gold relevance label."""

    doc_a: str
    doc_b: str
    label: bool


@dataclass
class CorpusHandle:
    """An ingested corpus: id-addressable documents plus graph stats.

    ``edge_count`` counts undirected edges after symmetrization;
    ``dropped_edges`` counts neighbor references that pointed at unknown
    ids (or at the document itself) and were removed during ingest.
    """

    documents: dict[str, Document]
    edge_count: int
    source_path: str = ""
    dropped_edges: int = 0

    def __len__(self) -> int:
        return len(self.documents)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self.documents

    def get(self, doc_id: str) -> Document:
        try:
            return self.documents[doc_id]
        except KeyError:
            raise CorpusError(f"unknown document id {doc_id!r}") from None

    def ids(self) -> list[str]:
        """All document ids in ascending lexicographic order."""
        return sorted(self.documents)

    def mean_token_count(self) -> float:
        if not self.documents:
            return 0.0
        return sum(d.token_count for d in self.documents.values()) / len(self.documents)


def _parse_jsonl(path: str | Path) -> list[tuple[int, dict]]:
    rows: list[tuple[int, dict]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}:{lineno}: expected a JSON object")
            rows.append((lineno, record))
    return rows


def ingest_corpus(path: str | Path, fmt: str = "jsonl") -> CorpusHandle:
    """Load a document file into an id-addressable handle.

    Neighbor lists are symmetrized (an edge listed on either endpoint
    counts once), references to unknown ids and self references are
    dropped with a warning, and ``token_count`` is filled in from the
    whitespace-token length of the abstract.  Loading the same file
    twice yields equal handles.
    """
    if fmt != "jsonl":
        raise CorpusError(f"unsupported corpus format {fmt!r}")
    raw: dict[str, dict] = {}
    order: list[str] = []
    for lineno, record in _parse_jsonl(path):
        doc_id = record.get("id")
        if not isinstance(doc_id, str) or not doc_id:
            raise CorpusError(f"{path}:{lineno}: missing or empty id")
        abstract = record.get("abstract")
        if not isinstance(abstract, str) or not abstract.strip():
            raise CorpusError(f"{path}:{lineno}: missing or empty abstract for {doc_id!r}")
        if doc_id in raw:
            raise CorpusError(f"{path}:{lineno}: duplicate id {doc_id}")
        neighbors = record.get("neighbors", [])
        if not isinstance(neighbors, list) or not all(isinstance(n, str) for n in neighbors):
            raise CorpusError(f"{path}:{lineno}: neighbors must be a list of ids")
        raw[doc_id] = {
            "title": record.get("title", "") or "",
            "abstract": abstract,
            "neighbors": neighbors,
        }
        order.append(doc_id)

    dropped = 0
    edges: set[frozenset[str]] = set()
    adjacency: dict[str, set[str]] = {doc_id: set() for doc_id in raw}
    for doc_id in order:
        for neighbor in raw[doc_id]["neighbors"]:
            if neighbor == doc_id or neighbor not in raw:
                dropped += 1
                continue
            edges.add(frozenset((doc_id, neighbor)))
    for edge in edges:
        a, b = tuple(edge)
        adjacency[a].add(b)
        adjacency[b].add(a)
    if dropped:
        logger.warning("%s: dropped %d dangling or self neighbor reference(s)", path, dropped)

    documents = {
        doc_id: Document(
            id=doc_id,
            title=raw[doc_id]["title"],
            abstract=raw[doc_id]["abstract"],
            neighbors=tuple(sorted(adjacency[doc_id])),
            token_count=len(raw[doc_id]["abstract"].split()),
        )
        for doc_id in order
    }
    return CorpusHandle(
        documents=documents,
        edge_count=len(edges),
        source_path=str(path),
        dropped_edges=dropped,
    )


def bfs_sample(corpus: CorpusHandle, seeds: list[str], n: int) -> list[str]:
    """Sample up to ``n`` document ids by breadth-first graph traversal.

    Seeds are visited in the given order; each node's unvisited
    neighbors are enqueued in ascending id order.  When the frontier
    empties before ``n`` documents are collected, traversal restarts
    from the lexicographically smallest unvisited id, so the result
    always has ``min(n, len(corpus))`` entries.  The returned order is
    the visitation order, which makes the sample a deterministic
    function of (corpus, seeds, n).
    """
    if n < 0:
        raise CorpusError(f"sample size must be non-negative, got {n}")
    for seed in seeds:
        if seed not in corpus:
            raise CorpusError(f"unknown seed id {seed!r}")

    visited: set[str] = set()
    queue: deque[str] = deque()
    for seed in seeds:
        if seed not in visited:
            visited.add(seed)
            queue.append(seed)

    output: list[str] = []
    while len(output) < n:
        if not queue:
            remaining = sorted(set(corpus.documents) - visited)
            if not remaining:
                break
            visited.add(remaining[0])
            queue.append(remaining[0])
        node = queue.popleft()
        output.append(node)
        for neighbor in corpus.documents[node].neighbors:  # already sorted
            if neighbor not in visited:
                visited.add(neighbor)
                queue.append(neighbor)
    return output


def load_matching_pairs(
    path: str | Path, corpus: CorpusHandle
) -> tuple[list[MatchingItem], int]:
    """Load labeled citation pairs, keeping file order.

    Returns ``(items, dropped)`` where ``dropped`` counts pairs that
    referenced unknown documents or paired a document with itself.  A
    record without a usable boolean ``label`` is an error, not a drop.
    """
    items: list[MatchingItem] = []
    dropped = 0
    for lineno, record in _parse_jsonl(path):
        doc_a, doc_b = record.get("doc_a"), record.get("doc_b")
        if not isinstance(doc_a, str) or not isinstance(doc_b, str):
            raise CorpusError(f"{path}:{lineno}: missing doc_a/doc_b ids")
        if "label" not in record:
            raise CorpusError(f"{path}:{lineno}: missing label field")
        label = record["label"]
        if isinstance(label, bool):
            value = label
        elif isinstance(label, int) and label in (0, 1):
            value = bool(label)
        else:
            raise CorpusError(f"{path}:{lineno}: label must be boolean, got {label!r}")
        if doc_a == doc_b or doc_a not in corpus or doc_b not in corpus:
            dropped += 1
            continue
        items.append(MatchingItem(doc_a=doc_a, doc_b=doc_b, label=value))
    if dropped:
        logger.warning("%s: dropped %d unresolvable pair(s)", path, dropped)
    return items, dropped
