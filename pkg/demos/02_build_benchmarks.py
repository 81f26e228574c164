"""
Building the three benchmarks from a triple store
=================================================

Two insight benchmarks come straight out of the triple index:

* deep     -- facts stated in exactly one place, once, so parametric
              knowledge is the only way to answer without retrieval
* multi    -- facts asserted with different objects by different
              documents, so a single retrieved passage cannot suffice

and a third, matching, wraps labeled citation pairs into Yes/No items.
Questions are written by a model that never sees the gold answers, and
any generated question that leaks a gold is dropped.
"""

from __future__ import annotations

import argparse
import tempfile
from pathlib import Path

from insightpipe import benchbuild, corpus, gateway, synth, triples


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    ap.add_argument("--docs", type=int, default=80)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    workdir = Path(tempfile.mkdtemp(prefix="insightpipe_demo_"))
    world = synth.build_oracle_world(n_docs=args.docs, seed=args.seed)
    paths = synth.write_world(world, workdir / "world")
    handle = corpus.ingest_corpus(paths["corpus"])

    kept, dropped = triples.filter_noisy_triples(
        triples.normalize_relations(world.all_triples(), triples.load_relation_rules())
    )
    index = triples.index_triples(kept)
    print(f"{len(kept)} triples over {len(index.by_sr)} keys ({dropped} noisy dropped)")

    deep = benchbuild.filter_deep_insight(index, handle)
    multi = benchbuild.filter_multi_source(index)
    print(f"deep items:  {len(deep)} (planted: {len(world.expected_deep)})")
    print(f"multi items: {len(multi)} (planted: {len(world.expected_multi)})")

    # The world also plants near-miss noise -- repeated subjects,
    # hallucinated objects, facts stated twice -- and none of it should
    # survive the filters:
    produced = {item.source_triples[0][:2] for item in deep} | {
        item.source_triples[0][:2] for item in multi
    }
    leaked = produced & set(world.rejected_keys)
    print(f"planted noise keys that leaked through: {len(leaked)}")

    # Question generation.  The qgen mock fills a fixed template; a real
    # endpoint gets the same prompt and the same leak check.
    qgen = gateway.handle_from_config("qgen", {"endpoint": "mock:", "mock": {"kind": "qgen_template"}})
    questioned = []
    dropped_q = 0
    for item in deep[:10] + multi[:5]:
        out = benchbuild.generate_question(item, qgen)
        if out is None:
            dropped_q += 1
        else:
            questioned.append(out)
    print(f"\nwrote questions for {len(questioned)} items ({dropped_q} dropped for gold leaks)")
    for item in questioned[:3]:
        print(f"  [{item.kind}] {item.question}   golds={list(item.golds)}")

    pairs, bad_pairs = corpus.load_matching_pairs(paths["matching"], handle)
    matching = benchbuild.build_matching_bench(pairs)
    print(f"\nmatching items: {len(matching)} ({bad_pairs} unusable pairs dropped)")

    # Every item can be audited by hand before release: the review file
    # is a TSV with one row per item; flip the last column to REJECT and
    # feed it back through apply_review (or `build-bench --review`).
    review_path = workdir / "review.tsv"
    benchbuild.write_review_file(questioned, review_path)
    print(f"\nreview sheet at {review_path}:")
    for line in review_path.read_text("utf-8").splitlines()[:4]:
        print("  " + line[:100])


if __name__ == "__main__":
    main()
