"""
Dense retrieval at two granularities
====================================

The same benchmark can be served by an index of whole documents or an
index of individual triples.  Triple units are tiny and single-fact, so
ranking them against a fact-seeking question is much easier -- this
script builds both indexes over one world and compares Hits@K / MRR.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from insightpipe import benchbuild, corpus, retrieval, synth, triples

workdir = Path(tempfile.mkdtemp(prefix="insightpipe_demo_"))
world = synth.build_oracle_world(n_docs=100, seed=4)
paths = synth.write_world(world, workdir / "world")
handle = corpus.ingest_corpus(paths["corpus"])

kept, _ = triples.filter_noisy_triples(
    triples.normalize_relations(world.all_triples(), triples.load_relation_rules())
)
index = triples.index_triples(kept)

# Bench items with template questions (the mock qgen never leaks golds).
from insightpipe import gateway

qgen = gateway.handle_from_config("qgen", {"endpoint": "mock:", "mock": {"kind": "qgen_template"}})
bench = []
for item in benchbuild.filter_deep_insight(index, handle) + benchbuild.filter_multi_source(index):
    questioned = benchbuild.generate_question(item, qgen)
    if questioned is not None:
        bench.append(questioned)

# The default embedder is a deterministic feature-hashing model: good
# enough to exercise every retrieval code path offline, and exact-search
# either way.  Swap the endpoint for a real embedding server in configs.
embedder = retrieval.EmbedderConfig(endpoint="mock:hash", model_name="hash-64", dim=64)

doc_units = [(doc_id, handle.get(doc_id).abstract) for doc_id in handle.ids()]
doc_index = retrieval.build_index(doc_units, "document", embedder)

triple_units = []
for doc_id in sorted(world.doc_triples):
    for i, (s, r, o) in enumerate(world.doc_triples[doc_id]):
        triple_units.append((f"{doc_id}#{i:05d}", f"{s} {r} {o}"))
triple_index = retrieval.build_index(triple_units, "triple", embedder)

print(f"document index: {len(doc_index)} units   triple index: {len(triple_index)} units")

# One query, side by side.
question = bench[0].question
print(f"\nquery: {question}")
for name, idx in (("document", doc_index), ("triple", triple_index)):
    result = retrieval.top_k(idx, question, 3, embedder)
    print(f"  top-3 in {name} index:")
    for unit_id, score in result.ranked:
        print(f"    {score:+.4f}  {unit_id}")

# Retrieval counts as correct when a unit of the gold *document* shows
# up, so the two granularities are directly comparable.
for name, idx in (("document", doc_index), ("triple", triple_index)):
    report = retrieval.eval_retriever(bench, idx, embedder, k_max=50)
    print(
        f"\n{name:>8}:  Hits@1 {report.hits_at(1):.3f}   Hits@5 {report.hits_at(5):.3f}   "
        f"MRR {report.mrr():.3f}   A-MRR {report.avg_mrr():.3f}"
    )
