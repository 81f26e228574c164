"""
Which insights actually flip answers?
=====================================

Compare a base run against an augmented run item by item.  Items whose
correctness *changed* become labeled samples (1 = augmentation fixed
it, 0 = augmentation broke it), and each word of the insight text gets
a one-proportion z-score against the overall flip rate.  Words with
large positive z are doing the heavy lifting; large negative z marks
material that correlates with breakage.

A perfect oracle generator never breaks anything, which makes the label
prior degenerate (p0 = 1) and the z-test meaningless -- the analyzer
refuses it loudly.  So this demo runs the generator with drop_mod=4, a
deterministic fault that answers every fourth prompt with a default.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from insightpipe import benchbuild, corpus, evalkit, gateway, pipelines, retrieval, synth, triples


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--docs", type=int, default=60)
    ap.add_argument("--drop-mod", type=int, default=4)
    # Tiny corpora produce few flips, so the default evidence floor of 3
    # samples per word would filter out nearly every row.  min_count=1
    # shows all rows; raise it when you have real volume.
    ap.add_argument("--min-count", type=int, default=1)
    args = ap.parse_args()

    workdir = Path(tempfile.mkdtemp(prefix="insightpipe_demo_"))
    world = synth.build_oracle_world(n_docs=args.docs, seed=7)
    paths = synth.write_world(world, workdir / "world")
    handle = corpus.ingest_corpus(paths["corpus"])

    kept, _ = triples.filter_noisy_triples(
        triples.normalize_relations(world.all_triples(), triples.load_relation_rules())
    )
    index = triples.index_triples(kept)
    qgen = gateway.handle_from_config(
        "qgen", {"endpoint": "mock:", "mock": {"kind": "qgen_template"}}
    )
    bench = []
    for item in benchbuild.filter_deep_insight(index, handle) + benchbuild.filter_multi_source(index):
        questioned = benchbuild.generate_question(item, qgen)
        if questioned is not None:
            bench.append(questioned)

    handles = synth.oracle_handles(kept)
    handles["generator"] = gateway.handle_from_config(
        "generator",
        {"endpoint": "mock:", "mock": {"kind": "extract_context", "drop_mod": args.drop_mod}},
    )

    embedder = retrieval.EmbedderConfig(endpoint="mock:hash", model_name="hash-64", dim=64)
    triple_units = [
        (f"{t.doc_id}#{i:05d}", f"{t.subject} {t.relation} {t.object}")
        for i, t in enumerate(kept)
    ]
    triple_index = retrieval.build_index(triple_units, "triple", embedder)

    records = pipelines.run_suite(
        bench,
        pipelines=("rag_triple", "insight"),
        handles=handles,
        triple_index=triple_index,
        embedder=embedder,
        k_values=(1,),
        m_values=(1,),
    )
    base = [r for r in records if r.pipeline == "rag_triple"]
    augmented = [r for r in records if r.pipeline == "insight"]

    samples = evalkit.flip_label_samples(base, augmented, bench)
    up = sum(s.label for s in samples)
    print(f"{len(samples)} flips: {up} fixed by augmentation, {len(samples) - up} broken")

    rows = evalkit.z_scores(samples, min_count=args.min_count)
    print(f"\n{'z':>8}  {'n':>3}  {'p_hat':>6}  word")
    for row in rows[:8]:
        print(f"{row.z:+8.3f}  {row.count:>3}  {row.p_hat:6.3f}  {row.word}")
    if len(rows) > 16:
        print("  ...")
    for row in rows[-8:]:
        print(f"{row.z:+8.3f}  {row.count:>3}  {row.p_hat:6.3f}  {row.word}")


if __name__ == "__main__":
    main()
