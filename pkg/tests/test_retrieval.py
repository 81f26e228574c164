from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from insightpipe import retrieval
from insightpipe.benchbuild import BenchmarkItem
from insightpipe.retrieval import (
    EmbedderConfig,
    ItemRanks,
    RetrievalError,
    RetrieverReport,
    VectorIndex,
    build_index,
    embed,
    eval_retriever,
    load_index,
    save_index,
    top_k,
    unit_doc,
)


def hash_config(dim=16):
    return EmbedderConfig(endpoint="mock:hash", dim=dim)


def table_config(table, dim):
    return EmbedderConfig(endpoint="mock:table", dim=dim, table=table)


# ---------------------------------------------------------------- hashing


def test_hash_vector_deterministic():
    a = retrieval._hash_vector("neural retrieval models", 32)
    b = retrieval._hash_vector("neural retrieval models", 32)
    assert np.array_equal(a, b)


def test_hash_vector_punctuation_and_case_share_buckets():
    # "model," must land where "model" lands, or queries ending in
    # punctuation would never match their own payloads.
    base = retrieval._hash_vector("model", 64)
    assert np.array_equal(retrieval._hash_vector("Model,", 64), base)
    assert np.array_equal(retrieval._hash_vector("(MODEL)", 64), base)


def test_hash_vector_empty_text_falls_back_to_basis():
    vec = retrieval._hash_vector("", 8)
    assert vec[0] == 1.0
    assert np.count_nonzero(vec) == 1
    # Pure punctuation strips down to nothing and takes the same path.
    assert np.array_equal(retrieval._hash_vector("... !!", 8), vec)


def test_hash_vector_is_additive_over_tokens():
    joint = retrieval._hash_vector("alpha beta", 64)
    parts = retrieval._hash_vector("alpha", 64) + retrieval._hash_vector("beta", 64)
    assert np.array_equal(joint, parts)


# ---------------------------------------------------------------- embed


def test_embed_rows_are_unit_norm_and_ordered():
    texts = ["one two three", "four five", "six"]
    matrix = embed(texts, hash_config(32))
    assert matrix.shape == (3, 32)
    assert matrix.dtype == np.float64
    assert np.allclose(np.linalg.norm(matrix, axis=1), 1.0)
    solo = embed(["four five"], hash_config(32))
    assert np.array_equal(matrix[1], solo[0])


def test_embed_empty_input():
    matrix = embed([], hash_config(8))
    assert matrix.shape == (0, 8)


def test_embed_rejects_nonpositive_dim():
    with pytest.raises(RetrievalError, match="dim must be positive"):
        embed(["x"], hash_config(0))


def test_embed_table_lookup_and_missing_text():
    config = table_config({"a": [3.0, 4.0]}, dim=2)
    matrix = embed(["a"], config)
    assert np.allclose(matrix[0], [0.6, 0.8])
    with pytest.raises(RetrievalError, match="no mock embedding"):
        embed(["b"], config)


def test_embed_rejects_zero_vector():
    config = table_config({"a": [0.0, 0.0]}, dim=2)
    with pytest.raises(RetrievalError, match="zero vector"):
        embed(["a"], config)


# ---------------------------------------------------------------- index


def test_build_index_shapes_and_payload_lookup():
    units = [("d1", "alpha text"), ("d2", "beta text")]
    index = build_index(units, "document", hash_config(16))
    assert len(index) == 2
    assert index.dim == 16
    assert index.ids == ["d1", "d2"]
    assert index.payload("d2") == "beta text"
    assert index.embedder_id == hash_config(16).identity()
    with pytest.raises(RetrievalError, match="unknown unit id"):
        index.payload("d3")


def test_build_index_rejects_duplicate_ids():
    units = [("d1", "x"), ("d2", "y"), ("d1", "z")]
    with pytest.raises(RetrievalError, match="duplicate unit id 'd1'"):
        build_index(units, "document", hash_config(8))


def test_index_rejects_unknown_granularity():
    with pytest.raises(RetrievalError, match="unknown granularity"):
        build_index([("d1", "x")], "sentence", hash_config(8))


def test_index_rejects_mismatched_lengths():
    vectors = embed(["a", "b"], hash_config(8))
    with pytest.raises(RetrievalError, match="disagree in length"):
        VectorIndex(
            granularity="document",
            ids=["d1", "d2", "d3"],
            vectors=vectors,
            payloads=["a", "b", "c"],
            embedder_id="x",
        )


def test_content_digest_tracks_content():
    index_a = build_index([("d1", "alpha")], "document", hash_config(8))
    index_b = build_index([("d1", "alpha")], "document", hash_config(8))
    index_c = build_index([("d1", "beta")], "document", hash_config(8))
    assert index_a.content_digest() == index_b.content_digest()
    assert index_a.content_digest() != index_c.content_digest()


# ---------------------------------------------------------------- top_k


def test_top_k_hand_ranking():
    table = {
        "pay a": [1.0, 0.0, 0.0],
        "pay b": [0.8, 0.6, 0.0],
        "pay c": [0.0, 1.0, 0.0],
        "query": [1.0, 0.0, 0.0],
    }
    config = table_config(table, dim=3)
    index = build_index([("dA", "pay a"), ("dB", "pay b"), ("dC", "pay c")], "document", config)
    result = top_k(index, "query", 3, config)
    assert [uid for uid, _ in result.ranked] == ["dA", "dB", "dC"]
    scores = [score for _, score in result.ranked]
    assert scores[0] == pytest.approx(1.0)
    assert scores[1] == pytest.approx(0.8)
    assert scores[2] == pytest.approx(0.0)
    assert result.granularity == "document"
    assert result.query == "query"


def test_top_k_ties_break_by_ascending_id():
    # Payloads that tokenize identically embed identically, forcing
    # exact score ties.
    config = hash_config(16)
    units = [("z9", "Shared Tokens."), ("a1", "shared tokens"), ("m5", "shared, tokens")]
    index = build_index(units, "document", config)
    result = top_k(index, "shared tokens", 3, config)
    assert [uid for uid, _ in result.ranked] == ["a1", "m5", "z9"]
    assert len({score for _, score in result.ranked}) == 1


def test_top_k_truncates_to_k():
    config = hash_config(16)
    index = build_index([(f"d{i}", f"text {i}") for i in range(5)], "document", config)
    result = top_k(index, "text 3", 2, config)
    assert len(result.ranked) == 2


def test_top_k_rejects_bad_k_and_empty_index():
    config = hash_config(8)
    index = build_index([("d1", "x")], "document", config)
    with pytest.raises(RetrievalError, match="k must be at least 1"):
        top_k(index, "x", 0, config)
    empty = VectorIndex(
        granularity="document",
        ids=[],
        vectors=np.zeros((0, 8)),
        payloads=[],
        embedder_id="x",
    )
    with pytest.raises(RetrievalError, match="empty index"):
        top_k(empty, "x", 1, config)


def test_top_k_rejects_dim_mismatch():
    index = build_index([("d1", "x")], "document", hash_config(8))
    with pytest.raises(RetrievalError, match="does not match index dim"):
        top_k(index, "x", 1, hash_config(4))


def brute_force_ranking(index, query_vec, k):
    """Independent selection: repeatedly pick the max score, lowest id."""
    scores = index.vectors @ query_vec
    remaining = list(range(len(index)))
    picked = []
    while remaining and len(picked) < k:
        best = remaining[0]
        for i in remaining[1:]:
            if scores[i] > scores[best] or (scores[i] == scores[best] and index.ids[i] < index.ids[best]):
                best = i
        picked.append((index.ids[best], float(scores[best])))
        remaining.remove(best)
    return picked


def test_top_k_matches_exhaustive_scan_with_duplicates():
    rng = np.random.default_rng(11)
    for trial in range(25):
        n = int(rng.integers(2, 20))
        dim = int(rng.integers(2, 9))
        raw = rng.standard_normal((n, dim))
        # Duplicate a few rows under different ids so ties are real.
        for _ in range(min(3, n - 1)):
            raw[int(rng.integers(0, n))] = raw[int(rng.integers(0, n))]
        table = {f"text {trial}-{i}": list(raw[i]) for i in range(n)}
        table["the query"] = list(rng.standard_normal(dim))
        config = table_config(table, dim=dim)
        units = [(f"u{i:03d}", f"text {trial}-{i}") for i in range(n)]
        index = build_index(units, "document", config)
        k = int(rng.integers(1, n + 1))
        result = top_k(index, "the query", k, config)
        expected = brute_force_ranking(index, embed(["the query"], config)[0], k)
        assert list(result.ranked) == expected


# ---------------------------------------------------------------- persistence


def test_save_load_roundtrip_exact(tmp_path):
    config = hash_config(12)
    units = [("dA", "alpha beta"), ("dB", "gamma delta"), ("dC", "épsilon")]
    index = build_index(units, "document", config)
    data_path = save_index(index, tmp_path / "docs")
    assert data_path == tmp_path / "docs.npz"
    assert (tmp_path / "docs.manifest.json").exists()
    loaded = load_index(tmp_path / "docs")
    assert loaded.ids == index.ids
    assert loaded.payloads == index.payloads
    assert loaded.granularity == "document"
    assert loaded.embedder_id == index.embedder_id
    assert np.array_equal(loaded.vectors, index.vectors)
    # The .npz suffix is accepted and means the same file.
    also = load_index(tmp_path / "docs.npz")
    assert also.ids == index.ids


def test_load_missing_files(tmp_path):
    with pytest.raises(RetrievalError, match="index file not found"):
        load_index(tmp_path / "nope")
    config = hash_config(8)
    index = build_index([("d1", "x")], "document", config)
    save_index(index, tmp_path / "docs")
    (tmp_path / "docs.manifest.json").unlink()
    with pytest.raises(RetrievalError, match="manifest not found"):
        load_index(tmp_path / "docs")


def test_load_rejects_digest_mismatch(tmp_path):
    config = hash_config(8)
    save_index(build_index([("d1", "x")], "document", config), tmp_path / "docs")
    manifest_file = tmp_path / "docs.manifest.json"
    manifest = json.loads(manifest_file.read_text("utf-8"))
    manifest["content_digest"] = "0" * 64
    manifest_file.write_text(json.dumps(manifest), "utf-8")
    with pytest.raises(RetrievalError, match="does not match its manifest digest"):
        load_index(tmp_path / "docs")


def test_load_rejects_shape_disagreement(tmp_path):
    config = hash_config(8)
    save_index(build_index([("d1", "x")], "document", config), tmp_path / "docs")
    manifest_file = tmp_path / "docs.manifest.json"
    manifest = json.loads(manifest_file.read_text("utf-8"))
    manifest["count"] = 7
    manifest_file.write_text(json.dumps(manifest), "utf-8")
    with pytest.raises(RetrievalError, match="shape disagrees"):
        load_index(tmp_path / "docs")


# ---------------------------------------------------------------- evaluation


def test_unit_doc_maps_triples_to_documents():
    assert unit_doc("paper42") == "paper42"
    assert unit_doc("paper42#00003") == "paper42"
    assert unit_doc("a#b#c") == "a"


def eval_fixture():
    """Four units whose ranking for "q main" is dA, dB, dC, dD."""
    table = {
        "pay a": [1.0, 0.0, 0.0, 0.0],
        "pay b": [0.8, 0.6, 0.0, 0.0],
        "pay c": [0.5, 0.0, 0.5, 0.0],
        "pay d": [0.0, 0.0, 0.0, 1.0],
        "q main": [1.0, 0.0, 0.0, 0.0],
    }
    config = table_config(table, dim=4)
    units = [("dA", "pay a"), ("dB", "pay b"), ("dC", "pay c"), ("dD", "pay d")]
    index = build_index(units, "document", config)
    return index, config


def test_eval_retriever_hand_ranks():
    index, config = eval_fixture()
    bench = [
        BenchmarkItem(id="q1", kind="deep", question="q main", source_docs=("dA",)),
        BenchmarkItem(id="q2", kind="deep", question="q main", source_docs=("dC",)),
        BenchmarkItem(id="q3", kind="deep", question="q main", source_docs=("dZ",)),
        BenchmarkItem(id="q4", kind="multi", question="q main", source_docs=("dA", "dZ")),
        BenchmarkItem(id="m1", kind="matching", pair=("dA", "dB", True)),
    ]
    report = eval_retriever(bench, index, config, k_max=5)
    assert [item.item_id for item in report.items] == ["q1", "q2", "q3", "q4"]
    assert report.items[0].ranks == (1,)
    assert report.items[1].ranks == (3,)
    assert report.items[2].ranks == (None,)
    assert report.items[3].ranks == (1, None)
    assert report.items[3].kind == "multi"


def test_eval_retriever_first_unit_sets_document_rank():
    # With triple units the best-ranked unit from a document is the
    # document's rank, later units from the same document are ignored.
    table = {
        "t one": [1.0, 0.0],
        "t two": [0.8, 0.6],
        "t three": [0.0, 1.0],
        "q": [1.0, 0.0],
    }
    config = table_config(table, dim=2)
    units = [("dA#00000", "t three"), ("dA#00001", "t one"), ("dB#00000", "t two")]
    index = build_index(units, "triple", config)
    bench = [
        BenchmarkItem(id="q1", kind="deep", question="q", source_docs=("dA",)),
        BenchmarkItem(id="q2", kind="deep", question="q", source_docs=("dB",)),
    ]
    report = eval_retriever(bench, index, config, k_max=3)
    assert report.items[0].ranks == (1,)
    assert report.items[1].ranks == (2,)


def test_eval_retriever_k_max_cuts_off_ranks():
    index, config = eval_fixture()
    bench = [BenchmarkItem(id="q1", kind="deep", question="q main", source_docs=("dC",))]
    report = eval_retriever(bench, index, config, k_max=2)
    assert report.items[0].ranks == (None,)


def test_eval_retriever_rejects_questionless_item():
    index, config = eval_fixture()
    bench = [BenchmarkItem(id="q1", kind="deep", question="", source_docs=("dA",))]
    with pytest.raises(RetrievalError, match="no question"):
        eval_retriever(bench, index, config)


def test_eval_retriever_rejects_bad_k_max():
    index, config = eval_fixture()
    with pytest.raises(RetrievalError, match="k_max"):
        eval_retriever([], index, config, k_max=0)


# ---------------------------------------------------------------- report


def frozen_report():
    items = [
        ItemRanks(item_id="q1", kind="deep", gold_docs=("dA",), ranks=(1,)),
        ItemRanks(item_id="q2", kind="deep", gold_docs=("dC",), ranks=(3,)),
        ItemRanks(item_id="q3", kind="deep", gold_docs=("dZ",), ranks=(None,)),
        ItemRanks(item_id="q4", kind="multi", gold_docs=("dA", "dZ"), ranks=(1, None)),
    ]
    return RetrieverReport(k_max=5, items=items)


def test_report_hand_frozen_values():
    report = frozen_report()
    assert report.hits_at(1) == pytest.approx(1 / 3)
    assert report.hits_at(5) == pytest.approx(2 / 3)
    assert report.mrr() == pytest.approx(0.4444444444444444)
    assert report.avg_hits_at(1) == pytest.approx(0.5)
    assert report.avg_mrr() == pytest.approx(0.5)


def test_report_summary_shape():
    summary = frozen_report().summary()
    assert summary["k_max"] == 5
    assert summary["n_single"] == 3
    assert summary["n_multi"] == 1
    # ks beyond k_max are dropped.
    assert sorted(summary["hits"]) == ["1", "5"]
    assert summary["hits"]["1"] == pytest.approx(1 / 3)
    assert summary["mrr"] == pytest.approx(4 / 9)
    assert summary["avg_hits"]["5"] == pytest.approx(0.5)
    assert summary["avg_mrr"] == pytest.approx(0.5)


def test_report_empty_sides():
    deep_only = RetrieverReport(
        k_max=5, items=[ItemRanks(item_id="q", kind="deep", gold_docs=("d",), ranks=(1,))]
    )
    assert "avg_hits" not in deep_only.summary()
    assert deep_only.avg_hits_at(1) == 0.0
    assert deep_only.avg_mrr() == 0.0
    empty = RetrieverReport(k_max=5, items=[])
    assert empty.hits_at(1) == 0.0
    assert empty.mrr() == 0.0
    assert "hits" not in empty.summary()


@given(
    ranks=st.lists(
        st.one_of(st.none(), st.integers(min_value=1, max_value=50)), min_size=1, max_size=30
    )
)
@settings(max_examples=60, deadline=None)
def test_report_hits_monotone_in_k(ranks):
    items = [
        ItemRanks(item_id=f"q{i}", kind="deep", gold_docs=("d",), ranks=(rank,))
        for i, rank in enumerate(ranks)
    ]
    report = RetrieverReport(k_max=50, items=items)
    values = [report.hits_at(k) for k in (1, 5, 10, 20, 50)]
    assert all(0.0 <= v <= 1.0 for v in values)
    assert values == sorted(values)
    assert report.mrr() <= values[-1] + 1e-12


@given(data=st.data())
@settings(max_examples=40, deadline=None)
def test_top_k_scores_sorted_and_ids_unique(data):
    n = data.draw(st.integers(min_value=1, max_value=12))
    dim = data.draw(st.integers(min_value=2, max_value=6))
    rng = np.random.default_rng(data.draw(st.integers(min_value=0, max_value=2**31)))
    raw = rng.standard_normal((n + 1, dim))
    table = {f"t{i}": list(raw[i]) for i in range(n)}
    table["q"] = list(raw[n])
    config = table_config(table, dim=dim)
    index = build_index([(f"u{i:02d}", f"t{i}") for i in range(n)], "document", config)
    k = data.draw(st.integers(min_value=1, max_value=n))
    result = top_k(index, "q", k, config)
    scores = [score for _, score in result.ranked]
    assert len(result.ranked) == k
    assert scores == sorted(scores, reverse=True)
    ids = [uid for uid, _ in result.ranked]
    assert len(set(ids)) == len(ids)
