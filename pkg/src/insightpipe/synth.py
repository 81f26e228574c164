"""Synthetic corpora with known ground truth, for tests and demos.

The generated world plants facts whose downstream fate is known by
construction:

* one **deep** fact per document — a unique (subject, relation) pair
  whose subject and object each surface exactly once in the abstract;
* **multi** facts spread over several documents with distinct objects;
* **noise**: stop-list subjects, facts whose subject repeats in the
  abstract, hallucinated objects absent from the text, and same-doc /
  same-object key collisions that the filters must reject.

Entity codes use disjoint fixed-length namespaces (``sdj…``/``odj…``
for deep subject/object, ``smx…``/``omx…`` for multi, ``rln…``/``rlm…``
for relations), so no code is a substring of another and none collides
with filler vocabulary.  That makes occurrence counting, answer
matching, and the expected filter outputs exact.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from . import gateway
from .triples import Triple

__all__ = [
    "SynthWorld",
    "build_oracle_world",
    "write_world",
    "make_run_config",
    "oracle_handles",
    "miner_kb_from_triples",
    "random_triple_world",
]

_FILLER = (
    "the model learns latent structure from large collections of text and "
    "images while keeping inference costs low enough for interactive use "
    "we study how annotation noise propagates through training and evaluate "
    "several calibration strategies under distribution shift with careful "
    "ablations that isolate the effect of pretraining data quality corpus "
    "size tokenization choices and optimizer schedules on downstream "
    "accuracy robustness and sample efficiency across many languages tasks "
    "benchmarks settings baselines architectures depths widths heads"
).split()

_CONSONANTS = "BCDFGHJKLMNPQRSTVWXZ"


def _code_factory(prefix: str, rng: random.Random):
    used: set[str] = set()

    def make() -> str:
        while True:
            code = prefix + "".join(rng.choice(_CONSONANTS) for _ in range(5))
            if code not in used:
                used.add(code)
                return code

    return make


@dataclass
class SynthWorld:
    """A generated corpus plus everything known about it."""

    corpus_records: list[dict]
    matching_records: list[dict]
    doc_triples: dict[str, list[tuple[str, str, str]]]
    expected_deep: set[tuple[str, str]]
    expected_multi: set[tuple[str, str]]
    rejected_keys: set[tuple[str, str]]
    seed: int

    def all_triples(self) -> list[Triple]:
        """Flat raw triples in document order, as an extractor would emit."""
        out: list[Triple] = []
        for doc_id in sorted(self.doc_triples):
            for subject, relation, obj in self.doc_triples[doc_id]:
                out.append(Triple(subject=subject, relation=relation, object=obj, doc_id=doc_id))
        return out


def build_oracle_world(
    n_docs: int = 120,
    n_multi: int = 12,
    n_topics: int = 6,
    n_pairs: int = 40,
    seed: int = 0,
    filler_range: tuple[int, int] = (150, 230),
) -> SynthWorld:
    """Generate a corpus whose filter and answer outcomes are known.

    Every document carries one deep fact; ``n_multi`` multi-source
    facts are spread over 2-4 documents each; a handful of noise
    triples exercise the rejection paths.  Abstracts are long enough
    (``filler_range`` filler tokens) that mined-insight contexts stay
    far below the mean document length.
    """
    rng = random.Random(seed)
    subj = _code_factory("sdj", rng)
    obj = _code_factory("odj", rng)
    msub = _code_factory("smx", rng)
    mobj = _code_factory("omx", rng)
    rel = _code_factory("rln", rng)
    mrel = _code_factory("rlm", rng)

    doc_ids = [f"d{i:04d}" for i in range(n_docs)]
    doc_tokens: dict[str, list[str]] = {}
    doc_triples: dict[str, list[tuple[str, str, str]]] = {d: [] for d in doc_ids}
    expected_deep: set[tuple[str, str]] = set()
    rejected: set[tuple[str, str]] = set()

    for i, doc_id in enumerate(doc_ids):
        count = rng.randint(*filler_range)
        tokens = [rng.choice(_FILLER) for _ in range(count)]
        tokens.append(f"topic{i % n_topics}")
        doc_tokens[doc_id] = tokens

    def plant(doc_id: str, sentence: list[str]) -> None:
        tokens = doc_tokens[doc_id]
        position = rng.randint(0, len(tokens))
        doc_tokens[doc_id] = tokens[:position] + sentence + tokens[position:]

    # One clean deep fact per document.
    for doc_id in doc_ids:
        s, r, o = subj(), rel(), obj()
        plant(doc_id, [s, r, o + "."])
        doc_triples[doc_id].append((s, r, o))
        expected_deep.add((s.casefold(), r.casefold()))

    # Multi-source facts: 2-4 docs, one distinct object each.
    expected_multi: set[tuple[str, str]] = set()
    for _ in range(n_multi):
        s, r = msub(), mrel()
        hosts = rng.sample(doc_ids, rng.randint(2, 4))
        for host in hosts:
            o = mobj()
            plant(host, [s, r, o + "."])
            doc_triples[host].append((s, r, o))
        expected_multi.add((s.casefold(), r.casefold()))

    # Noise the filters must reject.
    noise_hosts = rng.sample(doc_ids, 8)
    # (a) subject repeated in the abstract -> fails the exactly-once test.
    s, r, o = subj(), rel(), obj()
    plant(noise_hosts[0], [s, r, o + "."])
    plant(noise_hosts[0], [s, "again."])
    doc_triples[noise_hosts[0]].append((s, r, o))
    rejected.add((s.casefold(), r.casefold()))
    # (b) hallucinated object never present in the text.
    s, r = subj(), rel()
    doc_triples[noise_hosts[1]].append((s, r, "omxGHOSTX"))
    plant(noise_hosts[1], [s, r, "nothing."])
    rejected.add((s.casefold(), r.casefold()))
    # (c) two objects from the same single document -> fails the
    # two-document requirement and, as a two-entry key, deep candidacy.
    s, r = msub(), mrel()
    for _ in range(2):
        o = mobj()
        plant(noise_hosts[2], [s, r, o + "."])
        doc_triples[noise_hosts[2]].append((s, r, o))
    rejected.add((s.casefold(), r.casefold()))
    # (d) one object asserted by two documents -> single distinct object.
    s, r, o = msub(), mrel(), mobj()
    for host in noise_hosts[3:5]:
        plant(host, [s, r, o + "."])
        doc_triples[host].append((s, r, o))
    rejected.add((s.casefold(), r.casefold()))
    # (e) stop-list subject -> dropped before indexing.
    doc_triples[noise_hosts[5]].append(("We", "propose", obj()))

    corpus_records = []
    for i, doc_id in enumerate(doc_ids):
        neighbors = []
        if i + 1 < len(doc_ids):
            neighbors.append(doc_ids[i + 1])
        for _ in range(rng.randint(0, 2)):
            other = rng.choice(doc_ids)
            if other != doc_id:
                neighbors.append(other)
        corpus_records.append(
            {
                "id": doc_id,
                "title": f"Study {i} of topic{i % n_topics}",
                "abstract": " ".join(doc_tokens[doc_id]),
                "neighbors": neighbors,
            }
        )

    matching_records = []
    for _ in range(n_pairs):
        a, b = rng.sample(range(n_docs), 2)
        matching_records.append(
            {
                "doc_a": doc_ids[a],
                "doc_b": doc_ids[b],
                "label": (a % n_topics) == (b % n_topics),
            }
        )

    return SynthWorld(
        corpus_records=corpus_records,
        matching_records=matching_records,
        doc_triples=doc_triples,
        expected_deep=expected_deep,
        expected_multi=expected_multi,
        rejected_keys=rejected,
        seed=seed,
    )


def write_world(world: SynthWorld, directory: str | Path) -> dict[str, str]:
    """Write the world's input files; returns a name-to-path mapping."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "corpus": str(directory / "corpus.jsonl"),
        "matching": str(directory / "matching.jsonl"),
        "extractor_table": str(directory / "extractor_table.json"),
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for record in world.corpus_records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    with open(paths["matching"], "w", encoding="utf-8") as fh:
        for record in world.matching_records:
            fh.write(json.dumps(record, ensure_ascii=False) + "\n")
    table = {}
    for record in world.corpus_records:
        lines = [
            f"{s} | {r} | {o}" for s, r, o in world.doc_triples.get(record["id"], [])
        ]
        table[record["abstract"]] = "\n".join(lines)
    with open(paths["extractor_table"], "w", encoding="utf-8") as fh:
        json.dump({"key_from": "abstract", "table": table, "default": ""}, fh, ensure_ascii=False)
    return paths


def make_run_config(
    world_paths: dict[str, str],
    output_dir: str | Path,
    pipelines: tuple[str, ...] = ("vanilla", "rag_doc", "rag_triple", "insight"),
    k_values: tuple[int, ...] = (1, 3),
    m_values: tuple[int, ...] = (1,),
    seed: int = 0,
    generator_drop_mod: int = 0,
) -> dict:
    """A complete, offline run config for a written world.

    ``generator_drop_mod`` > 0 makes the generator an imperfect oracle
    (see :class:`insightpipe.gateway.MockBackend`), which is what the
    flip analysis demos need: a perfect generator never flips from
    correct to incorrect, leaving a one-sided label prior.
    """
    output_dir = str(output_dir)
    generator_mock: dict = {"kind": "extract_context"}
    if generator_drop_mod:
        generator_mock["drop_mod"] = int(generator_drop_mod)
    return {
        "seed": seed,
        "output_dir": output_dir,
        "corpus": world_paths["corpus"],
        "matching": world_paths["matching"],
        "embedder": {"endpoint": "mock:hash", "model_name": "hash-64", "dim": 64},
        "models": {
            "extractor": {
                "endpoint": "mock:",
                "mock": {"kind": "table", "path": world_paths["extractor_table"]},
            },
            "qgen": {"endpoint": "mock:", "mock": {"kind": "qgen_template"}},
            "identifier": {"endpoint": "mock:", "mock": {"kind": "qgen_invert"}},
            "miner": {
                "endpoint": "mock:",
                "mock": {"kind": "kb", "triples": f"{output_dir}/triples.jsonl"},
            },
            "generator": {"endpoint": "mock:", "mock": generator_mock},
            "judge": {"endpoint": "mock:", "mock": {"kind": "canned", "text": "Score: 1"}},
        },
        "pipelines": list(pipelines),
        "k_values": list(k_values),
        "m_values": list(m_values),
        "k_max": 50,
    }


def miner_kb_from_triples(triples: list[Triple]) -> dict[str, list[str]]:
    """``"subject relation" -> [objects]`` completions for a mock miner."""
    completions: dict[str, list[str]] = {}
    for triple in triples:
        key = f"{triple.subject} {triple.relation}"
        bucket = completions.setdefault(key, [])
        if triple.object not in bucket:
            bucket.append(triple.object)
    return completions


def oracle_handles(triples: list[Triple]) -> dict[str, gateway.ModelHandle]:
    """Mock handles that answer perfectly from the given triples.

    The identifier inverts templated questions back into fragments, the
    miner completes fragments from the triple table, and the generator
    copies its context — so answer quality reflects the pipeline
    plumbing, not any model.
    """
    return {
        "identifier": gateway.make_handle("identifier", mock={"kind": "qgen_invert"}),
        "miner": gateway.make_handle(
            "miner", mock=gateway.MockBackend(kind="kb", kb=gateway.MockKB(completions=miner_kb_from_triples(triples)))
        ),
        "generator": gateway.make_handle("generator", mock={"kind": "extract_context"}),
        "qgen": gateway.make_handle("qgen", mock={"kind": "qgen_template"}),
        "judge": gateway.make_handle("judge", mock={"kind": "canned", "text": "Score: 1"}),
    }


_SOUP = ("ab", "abc", "b", "ba", "cab", "bc", "ca", "abab", "c", "aa")
_SOUP_RELATIONS = ("uses", "is based on", "links", "cites")


def random_triple_world(rng: random.Random) -> tuple[list[dict], list[Triple]]:
    """A small adversarial world for filter fuzzing.

    Abstracts are soups of overlapping short strings, and triple fields
    are drawn both from the soup and from raw abstract slices that may
    cross token boundaries — the exact conditions under which substring
    counting must stay honest.  No ground truth accompanies the output;
    callers re-check filter predicates independently.
    """
    n_docs = rng.randint(2, 5)
    records = []
    for i in range(n_docs):
        tokens = rng.choices(_SOUP, k=rng.randint(5, 40))
        records.append(
            {
                "id": f"r{i:02d}",
                "title": f"soup {i}",
                "abstract": " ".join(tokens),
                "neighbors": [],
            }
        )
    abstracts = {r["id"]: r["abstract"] for r in records}

    def field_value(doc_id: str) -> str:
        if rng.random() < 0.5:
            return rng.choice(_SOUP)
        text = abstracts[doc_id]
        start = rng.randrange(len(text))
        piece = text[start : start + rng.randint(1, 6)].strip()
        return piece if piece else rng.choice(_SOUP)

    triples = []
    for _ in range(rng.randint(3, 15)):
        doc_id = f"r{rng.randrange(n_docs):02d}"
        triples.append(
            Triple(
                subject=field_value(doc_id),
                relation=rng.choice(_SOUP_RELATIONS),
                object=field_value(doc_id),
                doc_id=doc_id,
            )
        )
    return records, triples
