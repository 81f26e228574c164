"""Knowledge-triple extraction, normalization, and indexing.

Triples are (subject, relation, object) facts stamped with the id of
the document they came from.  An LLM proposes them one per line as
``subject | relation | object``; everything downstream (filters,
benchmark construction, the miner's training corpus) consumes the
normalized, indexed form.

The on-disk format is line-delimited JSON:

    {"s": "...", "r": "...", "o": "...", "doc": "..."}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .corpus import Document
from . import gateway

logger = logging.getLogger(__name__)

__all__ = [
    "Triple",
    "TripleError",
    "RelationRules",
    "TripleIndex",
    "load_relation_rules",
    "load_stopwords",
    "parse_triple_lines",
    "extract_triples",
    "normalize_relations",
    "filter_noisy_triples",
    "index_triples",
    "save_triples",
    "load_triples",
]

_ARTICLES = frozenset({"a", "an", "the"})


class TripleError(ValueError):
    """Raised for malformed triple files or rule sets."""


@dataclass(frozen=True)
class Triple:
    subject: str
    relation: str
    object: str
    doc_id: str


def _collapse(text: str) -> str:
    """Case-fold and collapse runs of whitespace to single spaces."""
    return " ".join(text.casefold().split())


@dataclass(frozen=True)
class RelationRules:
    """Normalization policy for relation strings.

    ``canonical_map`` holds ordered whole-string rewrites.  Rewrites
    are applied in listed order, repeatedly, until the relation stops
    changing, which makes normalization idempotent.  Rule sets whose
    rewrite chains never stabilize are rejected at construction.
    """

    case_fold: bool = True
    strip_articles: bool = True
    canonical_map: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        for pattern, _ in self.canonical_map:
            seen = {pattern}
            current = pattern
            for _ in range(len(self.canonical_map) + 1):
                rewritten = self._rewrite_once(current)
                if rewritten == current:
                    break
                if rewritten in seen:
                    raise TripleError(f"relation rule cycle involving {pattern!r}")
                seen.add(rewritten)
                current = rewritten
            else:
                raise TripleError(f"relation rules do not stabilize for {pattern!r}")

    def _rewrite_once(self, relation: str) -> str:
        for pattern, canonical in self.canonical_map:
            if relation == pattern:
                return canonical
        return relation

    def apply(self, relation: str) -> str:
        if self.case_fold:
            relation = _collapse(relation)
        else:
            relation = " ".join(relation.split())
        if self.strip_articles:
            kept = [tok for tok in relation.split() if tok.casefold() not in _ARTICLES]
            relation = " ".join(kept) if kept else relation
        while True:
            rewritten = self._rewrite_once(relation)
            if rewritten == relation:
                return relation
            relation = rewritten


def load_relation_rules(
    path: str | Path | None = None, *, case_fold: bool = True, strip_articles: bool = True
) -> RelationRules:
    """Load canonicalization rules from a TAB-separated file.

    Lines look like ``pattern<TAB>canonical``; blank lines and ``#``
    comments are ignored.  With no path, the (empty) packaged default
    is used.
    """
    if path is None:
        text = resources.files("insightpipe").joinpath("data/relation_rules.tsv").read_text("utf-8")
        source = "<packaged default>"
    else:
        text = Path(path).read_text(encoding="utf-8")
        source = str(path)
    rules: list[tuple[str, str]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "\t" not in stripped:
            raise TripleError(f"{source}:{lineno}: expected TAB-separated pattern and canonical form")
        pattern, canonical = stripped.split("\t", 1)
        rules.append((_collapse(pattern), _collapse(canonical)))
    return RelationRules(
        case_fold=case_fold, strip_articles=strip_articles, canonical_map=tuple(rules)
    )


def load_stopwords(path: str | Path | None = None) -> frozenset[str]:
    """Load the noise stop-list (one entry per line, ``#`` comments)."""
    if path is None:
        text = resources.files("insightpipe").joinpath("data/stopwords.txt").read_text("utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    entries = set()
    for line in text.splitlines():
        stripped = line.strip()
        if stripped and not stripped.startswith("#"):
            entries.add(_collapse(stripped))
    return frozenset(entries)


def parse_triple_lines(text: str) -> tuple[list[tuple[str, str, str]], int]:
    """Parse ``subject | relation | object`` lines from model output.

    The splitter tolerates leading bullets or numbering and angle/paren
    wrapping; extra pipes beyond the second are folded into the object.
    Returns ``(parsed, skipped)`` where ``skipped`` counts lines that
    did not yield three non-empty fields.
    """
    parsed: list[tuple[str, str, str]] = []
    skipped = 0
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        while line[:1] in {"-", "*", "•"}:
            line = line[1:].strip()
        head = line.split(" ", 1)[0]
        if head.rstrip(".)").isdigit() and head != line:
            line = line.split(" ", 1)[1].strip()
        if line[:1] in {"<", "("} and line[-1:] in {">", ")"}:
            line = line[1:-1].strip()
        if "|" not in line:
            skipped += 1
            continue
        parts = [part.strip() for part in line.split("|")]
        if len(parts) < 3:
            skipped += 1
            continue
        subject, relation = parts[0], parts[1]
        obj = " | ".join(parts[2:]).strip()
        if not subject or not relation or not obj:
            skipped += 1
            continue
        parsed.append((subject, relation, obj))
    return parsed, skipped


class ExtractionError(RuntimeError):
    """Raised when triple extraction fails for a document."""


def extract_triples(
    doc: Document,
    extractor: "gateway.ModelHandle",
    template: str | None = None,
    log: list | None = None,
) -> tuple[list[Triple], int]:
    """Ask the extractor model for the triples of one document.

    Exact duplicate (s, r, o) lines are removed, keeping first
    occurrence order.  Transport failures surface as
    :class:`ExtractionError` carrying the document id.
    """
    if template is None:
        template = gateway.load_prompt("extractor")
    prompt = gateway.render_prompt(template, doc.abstract)
    try:
        result = gateway.chat(extractor, [("user", prompt)], log=log)
    except gateway.GatewayError as exc:
        raise ExtractionError(f"extraction failed for document {doc.id}: {exc}") from exc
    rows, skipped = parse_triple_lines(result.text)
    if skipped:
        logger.warning("document %s: skipped %d unparseable triple line(s)", doc.id, skipped)
    triples: list[Triple] = []
    seen: set[tuple[str, str, str]] = set()
    for subject, relation, obj in rows:
        key = (subject, relation, obj)
        if key in seen:
            continue
        seen.add(key)
        triples.append(Triple(subject=subject, relation=relation, object=obj, doc_id=doc.id))
    return triples, skipped


def normalize_relations(triples: list[Triple], rules: RelationRules) -> list[Triple]:
    """Normalize all fields and drop exact duplicates.

    Subjects and objects are case-folded and whitespace-collapsed;
    relations additionally go through the rule set.  Order follows
    first occurrence.  The operation is idempotent.
    """
    normalized: list[Triple] = []
    seen: set[tuple[str, str, str, str]] = set()
    for triple in triples:
        candidate = Triple(
            subject=_collapse(triple.subject),
            relation=rules.apply(triple.relation),
            object=_collapse(triple.object),
            doc_id=triple.doc_id,
        )
        key = (candidate.subject, candidate.relation, candidate.object, candidate.doc_id)
        if key in seen:
            continue
        seen.add(key)
        normalized.append(candidate)
    return normalized


def filter_noisy_triples(
    triples: list[Triple], stopwords: frozenset[str] | None = None
) -> tuple[list[Triple], int]:
    """Drop triples whose subject or object is on the stop-list."""
    if stopwords is None:
        stopwords = load_stopwords()
    kept: list[Triple] = []
    dropped = 0
    for triple in triples:
        if _collapse(triple.subject) in stopwords or _collapse(triple.object) in stopwords:
            dropped += 1
            continue
        kept.append(triple)
    return kept, dropped


@dataclass
class TripleIndex:
    """Triples grouped by (subject, relation) key.

    Each key maps to its ``(object, doc_id)`` entries sorted by
    ``(doc_id, object)``; ``triple_count`` is the total number of
    stored entries, so multiplicity across documents is preserved.
    """

    by_sr: dict[tuple[str, str], list[tuple[str, str]]] = field(default_factory=dict)
    triple_count: int = 0

    def keys_sorted(self) -> list[tuple[str, str]]:
        return sorted(self.by_sr)

    def entries(self, subject: str, relation: str) -> list[tuple[str, str]]:
        return list(self.by_sr.get((subject, relation), ()))


def index_triples(triples: list[Triple]) -> TripleIndex:
    """Group normalized triples by (subject, relation).

    Exact duplicate (s, r, o, doc) entries collapse to one; distinct
    documents asserting the same fact stay distinct entries.
    """
    grouped: dict[tuple[str, str], list[tuple[str, str]]] = {}
    seen: set[tuple[str, str, str, str]] = set()
    count = 0
    for triple in triples:
        full = (triple.subject, triple.relation, triple.object, triple.doc_id)
        if full in seen:
            continue
        seen.add(full)
        grouped.setdefault((triple.subject, triple.relation), []).append(
            (triple.object, triple.doc_id)
        )
        count += 1
    for key in grouped:
        grouped[key].sort(key=lambda entry: (entry[1], entry[0]))
    return TripleIndex(by_sr=grouped, triple_count=count)


def save_triples(triples: list[Triple], path: str | Path) -> int:
    """Write triples as line-delimited JSON; returns the count."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for triple in triples:
            fh.write(
                json.dumps(
                    {"s": triple.subject, "r": triple.relation, "o": triple.object, "doc": triple.doc_id},
                    ensure_ascii=False,
                )
                + "\n"
            )
    return len(triples)


def load_triples(path: str | Path) -> list[Triple]:
    triples: list[Triple] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TripleError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            try:
                triples.append(
                    Triple(
                        subject=record["s"],
                        relation=record["r"],
                        object=record["o"],
                        doc_id=record["doc"],
                    )
                )
            except KeyError as exc:
                raise TripleError(f"{path}:{lineno}: missing field {exc}") from None
    return triples
