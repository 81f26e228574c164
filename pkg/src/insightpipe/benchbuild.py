"""Benchmark construction from indexed triples.

Two question-answering benchmarks come out of the triple index:

* **deep** items: facts a retriever is likely to miss — the
  (subject, relation) key has exactly one object, and both subject and
  object surface exactly once in the source abstract, so the fact is
  stated but not salient.
* **multi** items: facts whose evidence is spread out — the key has at
  least two distinct objects contributed by at least two distinct
  documents.

A third, **matching**, wraps labeled citation pairs as Yes/No decisions.

Questions are written by a model from the subject-relation pair and
rejected when they leak any gold answer.  A tab-separated review file
supports a manual pass over the generated items.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import gateway
from .artifacts import atomic_write_jsonl, atomic_write_text
from .corpus import CorpusHandle, MatchingItem
from .triples import TripleIndex

logger = logging.getLogger(__name__)

__all__ = [
    "BenchmarkError",
    "BenchmarkItem",
    "count_occurrences",
    "filter_deep_insight",
    "filter_multi_source",
    "generate_question",
    "generate_questions",
    "build_matching_bench",
    "validate_item",
    "emit_benchmark",
    "load_benchmark",
    "dataset_stats",
    "write_review_file",
    "apply_review",
]

KINDS = ("deep", "multi", "matching")


class BenchmarkError(ValueError):
    """Raised for invariant violations and malformed benchmark files."""


@dataclass(frozen=True)
class BenchmarkItem:
    id: str
    kind: str
    question: str = ""
    golds: tuple[str, ...] = ()
    source_docs: tuple[str, ...] = ()
    source_triples: tuple[tuple[str, str, str], ...] = ()
    pair: tuple[str, str, bool] | None = None

    def gold_fragment(self) -> str:
        """The target insight fragment: subject followed by relation."""
        if not self.source_triples:
            raise BenchmarkError(f"item {self.id} has no source triples")
        subject, relation, _ = self.source_triples[0]
        return f"{subject} {relation}"


def count_occurrences(haystack: str, needle: str) -> int:
    """Case-insensitive, non-overlapping substring count."""
    if not needle:
        return 0
    return haystack.casefold().count(needle.casefold())


def _norm(text: str) -> str:
    return " ".join(text.casefold().split())


def filter_deep_insight(index: TripleIndex, corpus: CorpusHandle) -> list[BenchmarkItem]:
    """Keep single-object facts stated exactly once in their abstract.

    A (subject, relation) key qualifies when it has exactly one
    (object, document) entry and both the subject and the object occur
    exactly once, case-insensitively, in that document's abstract.
    Items are numbered in sorted key order.
    """
    items: list[BenchmarkItem] = []
    for subject, relation in index.keys_sorted():
        entries = index.by_sr[(subject, relation)]
        if len(entries) != 1:
            continue
        obj, doc_id = entries[0]
        if doc_id not in corpus:
            continue
        abstract = corpus.documents[doc_id].abstract
        if count_occurrences(abstract, subject) != 1:
            continue
        if count_occurrences(abstract, obj) != 1:
            continue
        items.append(
            BenchmarkItem(
                id=f"deep-{len(items):04d}",
                kind="deep",
                golds=(obj,),
                source_docs=(doc_id,),
                source_triples=((subject, relation, obj),),
            )
        )
    return items


def filter_multi_source(index: TripleIndex) -> list[BenchmarkItem]:
    """Keep facts with >= 2 distinct objects from >= 2 distinct documents.

    Golds are the distinct objects of the key in entry order (entries
    are sorted by document then object), giving a deterministic gold
    ordering.  Items are numbered in sorted key order.
    """
    items: list[BenchmarkItem] = []
    for subject, relation in index.keys_sorted():
        entries = index.by_sr[(subject, relation)]
        objects: list[str] = []
        docs: list[str] = []
        triples: list[tuple[str, str, str]] = []
        for obj, doc_id in entries:
            if obj not in objects:
                objects.append(obj)
                triples.append((subject, relation, obj))
            if doc_id not in docs:
                docs.append(doc_id)
        if len(objects) < 2 or len(docs) < 2:
            continue
        items.append(
            BenchmarkItem(
                id=f"multi-{len(items):04d}",
                kind="multi",
                golds=tuple(objects),
                source_docs=tuple(docs),
                source_triples=tuple(triples),
            )
        )
    return items


def _leaks_gold(question: str, golds: tuple[str, ...]) -> bool:
    lowered = _norm(question)
    return any(_norm(gold) in lowered for gold in golds)


def generate_question(
    item: BenchmarkItem,
    qgen: gateway.ModelHandle,
    template: str | None = None,
    log: list | None = None,
) -> BenchmarkItem | None:
    """Write a question for a deep/multi item; drop it on a gold leak.

    The model sees the subject, the relation, and whether one or many
    objects are expected — never the objects.  If the question contains
    a gold answer (case-insensitive), one rewrite is requested with the
    forbidden strings spelled out; a second leak drops the item.
    """
    if item.kind not in ("deep", "multi"):
        raise BenchmarkError(f"item {item.id}: questions apply to deep/multi items only")
    if template is None:
        template = gateway.load_prompt("qgen")
    subject, relation, _ = item.source_triples[0]
    multiplicity = "multiple" if item.kind == "multi" else "single"
    prompt = gateway.render_prompt(template, multiplicity, subject, relation)
    question = gateway.chat(qgen, [("user", prompt)], log=log).text.strip()
    if _leaks_gold(question, item.golds):
        forbidden = "; ".join(item.golds)
        retry_prompt = f"{prompt}\nDo not mention any of: {forbidden}"
        question = gateway.chat(qgen, [("user", retry_prompt)], log=log).text.strip()
        if _leaks_gold(question, item.golds):
            logger.warning("item %s: question leaked a gold answer twice, dropping", item.id)
            return None
    if not question:
        logger.warning("item %s: empty question, dropping", item.id)
        return None
    return replace(item, question=question)


def generate_questions(
    items: list[BenchmarkItem],
    qgen: gateway.ModelHandle,
    template: str | None = None,
    log: list | None = None,
) -> tuple[list[BenchmarkItem], int]:
    """Generate questions for all items; returns (kept, dropped)."""
    kept: list[BenchmarkItem] = []
    dropped = 0
    for item in items:
        result = generate_question(item, qgen, template=template, log=log)
        if result is None:
            dropped += 1
        else:
            kept.append(result)
    return kept, dropped


def build_matching_bench(pairs: list[MatchingItem]) -> list[BenchmarkItem]:
    """Wrap labeled citation pairs as benchmark items, keeping order."""
    items = []
    for i, pair in enumerate(pairs):
        items.append(
            BenchmarkItem(
                id=f"match-{i:04d}",
                kind="matching",
                pair=(pair.doc_a, pair.doc_b, pair.label),
            )
        )
    return items


def validate_item(item: BenchmarkItem) -> None:
    """Check one item against its kind's invariants."""
    if not item.id:
        raise BenchmarkError("item with empty id")
    if item.kind not in KINDS:
        raise BenchmarkError(f"item {item.id}: unknown kind {item.kind!r}")
    if item.kind == "matching":
        if item.pair is None:
            raise BenchmarkError(f"item {item.id}: matching item without a pair")
        if item.golds or item.question:
            raise BenchmarkError(f"item {item.id}: matching items carry no question or golds")
        if item.pair[0] == item.pair[1]:
            raise BenchmarkError(f"item {item.id}: pair references a single document")
        return
    if item.pair is not None:
        raise BenchmarkError(f"item {item.id}: {item.kind} item with a matching pair")
    if not item.golds or any(not g for g in item.golds):
        raise BenchmarkError(f"item {item.id}: golds must be non-empty")
    if item.kind == "deep":
        if len(item.golds) != 1 or len(item.source_docs) != 1:
            raise BenchmarkError(f"item {item.id}: deep items have one gold and one source doc")
    if item.kind == "multi":
        if len(item.golds) < 2 or len(set(item.source_docs)) < 2:
            raise BenchmarkError(
                f"item {item.id}: multi items need >= 2 golds from >= 2 documents"
            )
    if item.question and _leaks_gold(item.question, item.golds):
        raise BenchmarkError(f"item {item.id}: question contains a gold answer")


def _item_to_record(item: BenchmarkItem) -> dict:
    record = {
        "id": item.id,
        "kind": item.kind,
        "question": item.question,
        "golds": list(item.golds),
        "source_docs": list(item.source_docs),
        "source_triples": [list(t) for t in item.source_triples],
    }
    if item.pair is not None:
        record["pair"] = {"doc_a": item.pair[0], "doc_b": item.pair[1], "label": item.pair[2]}
    return record


def _record_to_item(record: dict) -> BenchmarkItem:
    pair = record.get("pair")
    return BenchmarkItem(
        id=record["id"],
        kind=record["kind"],
        question=record.get("question", ""),
        golds=tuple(record.get("golds", ())),
        source_docs=tuple(record.get("source_docs", ())),
        source_triples=tuple(tuple(t) for t in record.get("source_triples", ())),
        pair=(pair["doc_a"], pair["doc_b"], bool(pair["label"])) if pair else None,
    )


def emit_benchmark(items: list[BenchmarkItem], path: str | Path) -> int:
    """Validate and write items as line-delimited JSON; returns count."""
    for item in items:
        validate_item(item)
    ids = [item.id for item in items]
    if len(set(ids)) != len(ids):
        raise BenchmarkError("duplicate item ids in benchmark")
    return atomic_write_jsonl(path, (_item_to_record(item) for item in items))


def load_benchmark(path: str | Path) -> list[BenchmarkItem]:
    items: list[BenchmarkItem] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                items.append(_record_to_item(record))
            except (json.JSONDecodeError, KeyError) as exc:
                raise BenchmarkError(f"{path}:{lineno}: malformed benchmark record ({exc})") from None
    return items


def dataset_stats(items: list[BenchmarkItem]) -> dict[str, int]:
    stats = {kind: 0 for kind in KINDS}
    for item in items:
        stats[item.kind] = stats.get(item.kind, 0) + 1
    stats["total"] = len(items)
    return stats


def write_review_file(items: list[BenchmarkItem], path: str | Path) -> None:
    """Emit a TSV for manual review: fill the decision column by hand.

    Any decision other than (case-insensitive) ``reject``/``r``/``no``
    keeps the item; the column starts blank, so an untouched file keeps
    everything.
    """
    lines = ["id\tkind\tquestion\tgolds\tdecision"]
    for item in items:
        question = item.question.replace("\t", " ").replace("\n", " ")
        golds = "; ".join(item.golds).replace("\t", " ")
        lines.append(f"{item.id}\t{item.kind}\t{question}\t{golds}\t")
    atomic_write_text(path, "\n".join(lines) + "\n")


def apply_review(
    items: list[BenchmarkItem], path: str | Path
) -> tuple[list[BenchmarkItem], int]:
    """Apply review decisions; returns (kept, rejected_count)."""
    decisions: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if not header.startswith("id\t"):
            raise BenchmarkError(f"{path}: not a review file")
        for line in fh:
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) < 5:
                continue
            decisions[parts[0]] = parts[4].strip().casefold()
    kept = []
    rejected = 0
    for item in items:
        if decisions.get(item.id, "") in {"reject", "r", "no"}:
            rejected += 1
        else:
            kept.append(item)
    return kept, rejected
