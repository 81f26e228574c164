"""Training data: corpus/triple loading, linearization, vocab, toy corpus.

File formats are shared with the retrieval pipeline that produces them:

- corpus file: JSONL, one ``{"id", "title", "abstract", "neighbors"}``
  object per line;
- triple file: JSONL, one ``{"s", "r", "o", "doc"}`` object per line.

Linearization turns both into plain-sentence training records.  A triple
``(a, uses, b)`` becomes the standalone sentence ``"a uses b."`` so the
fact can be parsed back out of the record by splitting on whitespace.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path

log = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"[^\s.]+|\.")

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"


class DataError(ValueError):
    """Raised when an input file is missing or malformed."""


# ---------------------------------------------------------------------------
# loading


@dataclass(frozen=True)
class Doc:
    id: str
    title: str
    abstract: str


@dataclass(frozen=True)
class Triple:
    s: str
    r: str
    o: str
    doc: str


def load_corpus_file(path: str | Path) -> list[Doc]:
    """Read a corpus JSONL file into :class:`Doc` records."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file not found: {path}")
    docs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if "id" not in record or "abstract" not in record:
                raise DataError(f"{path}:{lineno}: record needs 'id' and 'abstract'")
            docs.append(
                Doc(
                    id=str(record["id"]),
                    title=str(record.get("title", "")),
                    abstract=str(record["abstract"]),
                )
            )
    if not docs:
        raise DataError(f"corpus file is empty: {path}")
    return docs


def load_triples_file(path: str | Path) -> list[Triple]:
    """Read a triple JSONL file; an empty file yields an empty list."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"triple file not found: {path}")
    triples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            for key in ("s", "r", "o", "doc"):
                if key not in record:
                    raise DataError(f"{path}:{lineno}: triple record needs '{key}'")
            triples.append(
                Triple(
                    s=str(record["s"]),
                    r=str(record["r"]),
                    o=str(record["o"]),
                    doc=str(record["doc"]),
                )
            )
    return triples


# ---------------------------------------------------------------------------
# linearization


def linearize_triple(triple: Triple) -> str:
    """Render one triple as a standalone plain sentence."""
    return f"{triple.s} {triple.r} {triple.o}."


def parse_linearized_triple(sentence: str) -> tuple[str, str, str]:
    """Invert :func:`linearize_triple` for single-word subject/object.

    The relation may span several words; subject is the first token and
    object the last, which matches how the sentences are built.
    """
    body = sentence.strip()
    if not body.endswith("."):
        raise DataError(f"not a linearized triple (no trailing period): {sentence!r}")
    parts = body[:-1].split()
    if len(parts) < 3:
        raise DataError(f"not a linearized triple (needs >= 3 tokens): {sentence!r}")
    return parts[0], " ".join(parts[1:-1]), parts[-1]


def linearize_training_data(docs: list[Doc], triples: list[Triple]) -> list[str]:
    """Build the continued-pretraining record list.

    One record per abstract plus one per triple.  Order is deterministic:
    abstracts sorted by document id, then triples grouped by document id
    (sorted) keeping their file order within a document.  Triples whose
    ``doc`` is not in the corpus still train fine; they sort by their own
    doc id at the end of the per-doc grouping.
    """
    if not docs:
        raise DataError("cannot linearize an empty corpus")
    records = [doc.abstract for doc in sorted(docs, key=lambda d: d.id)]
    if not triples:
        log.warning("triple file is empty; training on abstracts only")
        return records
    indexed = sorted(enumerate(triples), key=lambda pair: (pair[1].doc, pair[0]))
    records.extend(linearize_triple(t) for _, t in indexed)
    return records


# ---------------------------------------------------------------------------
# tokenization


def tokenize(text: str) -> list[str]:
    """Word-level split; a period is its own token."""
    return _TOKEN_RE.findall(text)


class Vocab:
    """Word vocabulary with ``<pad>/<bos>/<eos>/<unk>`` specials."""

    def __init__(self, words: list[str]):
        specials = [PAD, BOS, EOS, UNK]
        seen = set(specials)
        ordered = list(specials)
        for word in words:
            if word not in seen:
                seen.add(word)
                ordered.append(word)
        self.itos = ordered
        self.stoi = {w: i for i, w in enumerate(ordered)}

    @classmethod
    def build(cls, records: list[str]) -> "Vocab":
        words = sorted({tok for rec in records for tok in tokenize(rec)})
        return cls(words)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def encode(self, text: str, add_bos: bool = True, add_eos: bool = False) -> list[int]:
        unk = self.stoi[UNK]
        ids = [self.stoi.get(tok, unk) for tok in tokenize(text)]
        if add_bos:
            ids.insert(0, self.bos_id)
        if add_eos:
            ids.append(self.eos_id)
        return ids

    def decode(self, ids: list[int]) -> str:
        keep = {self.pad_id, self.bos_id, self.eos_id}
        return " ".join(self.itos[i] for i in ids if i not in keep)

    def to_json(self) -> str:
        return json.dumps({"itos": self.itos})

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        itos = json.loads(text)["itos"]
        vocab = cls.__new__(cls)
        vocab.itos = list(itos)
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        return vocab


# ---------------------------------------------------------------------------
# toy corpus

_RELATIONS = [
    "governs",
    "binds",
    "precedes",
    "encodes",
    "modulates",
    "anchors",
    "shadows",
    "feeds",
]

_FILLER = (
    "the survey revisits measurements logged during the pilot phase".split()
    + "replication notes stayed consistent across both bench setups".split()
    + "later trials flagged drift the crew could not reproduce".split()
    + "archived plots show the interval holding rather steady".split()
)

_TEMPLATES = [
    "this note surveys {s} while tracking {o} across runs.",
    "observers logged {o} first and {s} soon after.",
    "a follow-up audit kept {s} separate from {o} on purpose.",
    "field checks placed {o} near the rig and {s} off to the side.",
]


def make_toy_corpus(
    out_dir: str | Path,
    n_docs: int = 50,
    facts_per_doc: int = 3,
    seed: int = 0,
) -> tuple[Path, Path]:
    """Write a deterministic toy corpus + triple file for smoke training.

    Every document plants ``facts_per_doc`` triples.  Subject and object
    tokens of each fact do appear inside the abstract (in scattered
    filler sentences) but the subject-relation-object sequence itself
    never does — the linearized triple records are the only place the
    completion pattern occurs, so memorizing it is squarely the
    adapter's job.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    corpus_path = out_dir / "corpus.jsonl"
    triples_path = out_dir / "triples.jsonl"
    fact_no = 0
    with corpus_path.open("w", encoding="utf-8") as cfh, triples_path.open(
        "w", encoding="utf-8"
    ) as tfh:
        for d in range(n_docs):
            doc_id = f"toy{d:04d}"
            sentences = []
            for _ in range(facts_per_doc):
                subject = f"subj{fact_no:03d}"
                relation = rng.choice(_RELATIONS)
                obj = f"obj{fact_no:03d}"
                fact_no += 1
                template = rng.choice(_TEMPLATES)
                sentences.append(template.format(s=subject, o=obj))
                tfh.write(
                    json.dumps({"s": subject, "r": relation, "o": obj, "doc": doc_id})
                    + "\n"
                )
            filler = " ".join(rng.choice(_FILLER) for _ in range(rng.randint(8, 14)))
            sentences.insert(rng.randrange(len(sentences) + 1), filler + ".")
            abstract = " ".join(sentences)
            record = {
                "id": doc_id,
                "title": f"toy record {d}",
                "abstract": abstract,
                "neighbors": [],
            }
            cfh.write(json.dumps(record) + "\n")
    return corpus_path, triples_path
