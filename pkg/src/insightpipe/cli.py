"""Command-line interface: each pipeline stage as a subcommand.

The stages form a file-level dataflow under the config's
``output_dir``::

    ingest -> extract -> build-bench -> index build -> run -> eval -> report
                                                    \\-> index eval    \\-> analyze-z

Every command writes its artifact atomically and records input/config
digests in a ``manifest.jsonl``; re-running with unchanged digests is a
no-op unless ``--force`` is given.  Where a config file value and a
flag disagree, the config file wins — flags fill gaps only.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import yaml

from . import __version__, artifacts, benchbuild, corpus as corpus_mod, evalkit, gateway
from . import pipelines as pipelines_mod
from . import retrieval, synth, triples as triples_mod

_ERRORS = (
    ValueError,
    RuntimeError,
    OSError,
)


class CliError(RuntimeError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        raise CliError("a --config file is required")
    config_path = Path(path)
    if not config_path.exists():
        raise CliError(f"config file not found: {config_path}")
    loaded = yaml.safe_load(config_path.read_text(encoding="utf-8"))
    if not isinstance(loaded, dict):
        raise CliError(f"config file {config_path} must hold a mapping")
    if "output_dir" not in loaded:
        raise CliError("config is missing output_dir")
    return loaded


def _out(config: dict) -> Path:
    out = Path(config["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path: Path, what: str, producer: str) -> Path:
    if not path.exists():
        raise CliError(f"{what} missing: run `insightpipe {producer}` first (expected {path})")
    return path


def _config_input(config: dict, key: str, flag: str | None = None) -> Path:
    value = config.get(key) or flag
    if not value:
        raise CliError(f"config is missing {key}")
    path = Path(value)
    if not path.exists():
        raise CliError(f"{key} file not found: {path}")
    return path


def _model_handle(config: dict, role: str) -> gateway.ModelHandle:
    models = config.get("models") or {}
    if role not in models:
        raise CliError(f"config has no models.{role} entry")
    return gateway.handle_from_config(role, models[role])


def _embedder(config: dict) -> retrieval.EmbedderConfig:
    spec = dict(config.get("embedder") or {"endpoint": "mock:hash"})
    return retrieval.EmbedderConfig(**spec)


def _scoped_digest(config: dict, keys: tuple[str, ...]) -> str:
    scoped = {key: config.get(key) for key in keys}
    return artifacts.config_digest(scoped)


def _maybe_skip(target: Path, inputs_digest: str, cfg_digest: str, force: bool) -> bool:
    if not force and artifacts.is_up_to_date(target, inputs_digest, cfg_digest):
        print(f"{target} up to date (use --force to rebuild)")
        return True
    return False


def _record(target: Path, command: str, inputs_digest: str, cfg_digest: str) -> None:
    artifacts.record_artifact(target, command, inputs_digest, cfg_digest, __version__)


# --------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    config = _load_config(args.config)
    corpus_path = _config_input(config, "corpus")
    handle = corpus_mod.ingest_corpus(corpus_path)
    report = {
        "documents": len(handle),
        "edges": handle.edge_count,
        "dropped_edges": handle.dropped_edges,
        "mean_token_count": round(handle.mean_token_count(), 4),
    }
    matching_value = config.get("matching")
    inputs = artifacts.sha256_file(corpus_path)
    if matching_value:
        pairs, dropped = corpus_mod.load_matching_pairs(_config_input(config, "matching"), handle)
        report["matching_pairs"] = len(pairs)
        report["dropped_pairs"] = dropped
        inputs += artifacts.sha256_file(matching_value)
    target = _out(config) / "corpus_report.json"
    cfg_digest = _scoped_digest(config, ("corpus", "matching"))
    if _maybe_skip(target, inputs, cfg_digest, args.force):
        return 0
    artifacts.atomic_write_text(target, json.dumps(report, indent=2, sort_keys=True) + "\n")
    _record(target, "ingest", inputs, cfg_digest)
    print(f"wrote {target} ({report['documents']} documents, {report['edges']} edges)")
    return 0


def cmd_extract(args) -> int:
    config = _load_config(args.config)
    corpus_path = _config_input(config, "corpus")
    handle = corpus_mod.ingest_corpus(corpus_path)
    target = _out(config) / "triples.jsonl"
    inputs = artifacts.sha256_file(corpus_path)
    cfg_digest = _scoped_digest(config, ("corpus", "sample", "relation_rules", "stopwords")) + artifacts.config_digest(
        (config.get("models") or {}).get("extractor") or {}
    )
    if _maybe_skip(target, inputs, cfg_digest, args.force):
        return 0

    doc_ids = handle.ids()
    sample = config.get("sample") or {}
    if sample:
        doc_ids = corpus_mod.bfs_sample(handle, sample.get("seeds") or [doc_ids[0]], int(sample.get("n", len(doc_ids))))
    extractor = _model_handle(config, "extractor")
    template = (
        gateway.load_prompt_file(config["extractor_template"])
        if config.get("extractor_template")
        else None
    )

    def one(doc_id: str):
        return triples_mod.extract_triples(handle.documents[doc_id], extractor, template=template)

    if extractor.parallelism_cap > 1 and len(doc_ids) > 1:
        with ThreadPoolExecutor(max_workers=extractor.parallelism_cap) as pool:
            results = list(pool.map(one, doc_ids))
    else:
        results = [one(doc_id) for doc_id in doc_ids]
    raw: list[triples_mod.Triple] = []
    skipped = 0
    for extracted, bad_lines in results:
        raw.extend(extracted)
        skipped += bad_lines

    rules = triples_mod.load_relation_rules(config.get("relation_rules"))
    normalized = triples_mod.normalize_relations(raw, rules)
    stopwords = triples_mod.load_stopwords(config.get("stopwords"))
    kept, dropped = triples_mod.filter_noisy_triples(normalized, stopwords)
    triples_mod.save_triples(kept, target)
    report = {
        "documents": len(doc_ids),
        "raw_triples": len(raw),
        "normalized_triples": len(normalized),
        "kept_triples": len(kept),
        "noise_dropped": dropped,
        "unparseable_lines": skipped,
    }
    artifacts.atomic_write_text(
        _out(config) / "extract_report.json", json.dumps(report, indent=2, sort_keys=True) + "\n"
    )
    _record(target, "extract", inputs, cfg_digest)
    print(f"wrote {target} ({len(kept)} triples; {dropped} noisy dropped, {skipped} lines unparseable)")
    return 0


def cmd_build_bench(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    triples_path = _require(out / "triples.jsonl", "triples", "extract")
    corpus_path = _config_input(config, "corpus")
    handle = corpus_mod.ingest_corpus(corpus_path)
    inputs = artifacts.sha256_file(triples_path) + artifacts.sha256_file(corpus_path)
    matching_value = config.get("matching")
    if matching_value:
        inputs += artifacts.sha256_file(_config_input(config, "matching"))
    if args.review:
        inputs += artifacts.sha256_file(args.review)
    cfg_digest = artifacts.config_digest((config.get("models") or {}).get("qgen") or {})
    target = out / "deep.jsonl"
    if _maybe_skip(target, inputs, cfg_digest, args.force):
        return 0

    triples = triples_mod.load_triples(triples_path)
    index = triples_mod.index_triples(triples)
    deep = benchbuild.filter_deep_insight(index, handle)
    multi = benchbuild.filter_multi_source(index)
    qgen = _model_handle(config, "qgen")
    template = (
        gateway.load_prompt_file(config["qgen_template"]) if config.get("qgen_template") else None
    )

    def ask(item):
        return benchbuild.generate_question(item, qgen, template=template)

    dropped = 0
    questioned: dict[str, list] = {"deep": [], "multi": []}
    for kind, items in (("deep", deep), ("multi", multi)):
        if qgen.parallelism_cap > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=qgen.parallelism_cap) as pool:
                results = list(pool.map(ask, items))
        else:
            results = [ask(item) for item in items]
        for result in results:
            if result is None:
                dropped += 1
            else:
                questioned[kind].append(result)
    deep, multi = questioned["deep"], questioned["multi"]

    if args.review:
        deep, rejected_deep = benchbuild.apply_review(deep, args.review)
        multi, rejected_multi = benchbuild.apply_review(multi, args.review)
        print(f"review applied: rejected {rejected_deep + rejected_multi} item(s)")

    benchbuild.emit_benchmark(deep, out / "deep.jsonl")
    benchbuild.emit_benchmark(multi, out / "multi.jsonl")
    stats = {
        "deep": len(deep),
        "multi": len(multi),
        "question_dropped": dropped,
        "triples": index.triple_count,
    }
    if matching_value:
        pairs, _ = corpus_mod.load_matching_pairs(matching_value, handle)
        matching_bench = benchbuild.build_matching_bench(pairs)
        benchbuild.emit_benchmark(matching_bench, out / "matching_bench.jsonl")
        stats["matching"] = len(matching_bench)
    benchbuild.write_review_file(deep + multi, out / "review.tsv")
    artifacts.atomic_write_text(
        out / "bench_stats.json", json.dumps(stats, indent=2, sort_keys=True) + "\n"
    )
    _record(target, "build-bench", inputs, cfg_digest)
    print(f"wrote {out}/deep.jsonl, multi.jsonl ({stats})")
    return 0


def _index_base(out: Path, granularity: str) -> Path:
    return out / f"index_{granularity}"


def _build_units(config: dict, granularity: str, out: Path) -> list[tuple[str, str]]:
    if granularity == "document":
        handle = corpus_mod.ingest_corpus(_config_input(config, "corpus"))
        return [(doc_id, handle.documents[doc_id].abstract) for doc_id in handle.ids()]
    triples_path = _require(out / "triples.jsonl", "triples", "extract")
    triples = triples_mod.load_triples(triples_path)
    return [
        (f"{t.doc_id}#{i:05d}", f"{t.subject} {t.relation} {t.object}")
        for i, t in enumerate(triples)
    ]


def cmd_index_build(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    granularity = args.granularity
    units = _build_units(config, granularity, out)
    embedder = _embedder(config)
    base = _index_base(out, granularity)
    target = base.with_suffix(".npz")
    if granularity == "document":
        inputs = artifacts.sha256_file(_config_input(config, "corpus"))
    else:
        inputs = artifacts.sha256_file(out / "triples.jsonl")
    cfg_digest = _scoped_digest(config, ("embedder",))
    if _maybe_skip(target, inputs, cfg_digest, args.force):
        return 0
    index = retrieval.build_index(units, granularity, embedder)
    retrieval.save_index(index, base)
    _record(target, "index build", inputs, cfg_digest)
    print(f"wrote {target} ({len(index)} unit(s), dim {index.dim})")
    return 0


def cmd_index_query(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    base = _index_base(out, args.granularity)
    _require(base.with_suffix(".npz"), f"{args.granularity} index", "index build")
    index = retrieval.load_index(base)
    result = retrieval.top_k(index, args.text, args.k, _embedder(config))
    for rank, (unit_id, score) in enumerate(result.ranked, start=1):
        payload = index.payload(unit_id)
        snippet = payload if len(payload) <= 80 else payload[:77] + "..."
        print(f"{rank:3d}  {score:+.4f}  {unit_id}  {snippet}")
    return 0


def _load_benches(out: Path, kinds: tuple[str, ...] = ("deep", "multi")) -> list:
    bench = []
    for kind in kinds:
        name = "matching_bench.jsonl" if kind == "matching" else f"{kind}.jsonl"
        path = out / name
        if kind == "matching":
            if path.exists():
                bench.extend(benchbuild.load_benchmark(path))
        else:
            _require(path, f"{kind} benchmark", "build-bench")
            bench.extend(benchbuild.load_benchmark(path))
    return bench


def cmd_index_eval(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    base = _index_base(out, args.granularity)
    _require(base.with_suffix(".npz"), f"{args.granularity} index", "index build")
    index = retrieval.load_index(base)
    bench = _load_benches(out)
    report = retrieval.eval_retriever(bench, index, _embedder(config), k_max=int(config.get("k_max", 50)))
    summary = report.summary()
    target = out / f"retriever_{args.granularity}.json"
    artifacts.atomic_write_text(target, json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    bench = _load_benches(out, ("deep", "multi", "matching"))
    pipelines = config.get("pipelines") or args.pipelines or ["vanilla"]
    handles = {}
    for role in ("identifier", "miner", "generator"):
        if role in (config.get("models") or {}):
            handles[role] = _model_handle(config, role)
    corpus_handle = None
    if any(item.kind == "matching" for item in bench):
        corpus_handle = corpus_mod.ingest_corpus(_config_input(config, "corpus"))
    embedder = _embedder(config)
    doc_index = triple_index = None
    if "rag_doc" in pipelines:
        doc_base = _index_base(out, "document")
        _require(doc_base.with_suffix(".npz"), "document index", "index build")
        doc_index = retrieval.load_index(doc_base)
    if "rag_triple" in pipelines:
        triple_base = _index_base(out, "triple")
        _require(triple_base.with_suffix(".npz"), "triple index", "index build --granularity triple")
        triple_index = retrieval.load_index(triple_base)

    target = out / "records.jsonl"
    inputs = "".join(
        artifacts.sha256_file(out / name)
        for name in ("deep.jsonl", "multi.jsonl")
        if (out / name).exists()
    )
    if (out / "matching_bench.jsonl").exists():
        inputs += artifacts.sha256_file(out / "matching_bench.jsonl")
    if (out / "triples.jsonl").exists():
        inputs += artifacts.sha256_file(out / "triples.jsonl")
    cfg_digest = _scoped_digest(config, ("models", "pipelines", "k_values", "m_values", "n_samples", "seed"))
    if _maybe_skip(target, inputs, cfg_digest, args.force):
        return 0

    records = pipelines_mod.run_suite(
        bench,
        pipelines=pipelines,
        handles=handles,
        corpus=corpus_handle,
        doc_index=doc_index,
        triple_index=triple_index,
        embedder=embedder,
        k_values=tuple(config.get("k_values") or (1,)),
        m_values=tuple(config.get("m_values") or (1,)),
        n_samples=config.get("n_samples"),
    )
    pipelines_mod.save_run_records(records, target)
    _record(target, "run", inputs, cfg_digest)
    print(f"wrote {target} ({len(records)} record(s) across {len(pipelines)} pipeline(s))")
    return 0


def _group_records(records):
    groups: dict[tuple[str, int], list] = {}
    for record in records:
        groups.setdefault((record.pipeline, record.k_or_m), []).append(record)
    return dict(sorted(groups.items()))


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    records_path = _require(out / "records.jsonl", "run records", "run")
    bench = _load_benches(out, ("deep", "multi", "matching"))
    records = pipelines_mod.load_run_records(records_path)
    reports = [
        evalkit.aggregate(group, bench) for group in _group_records(records).values()
    ]
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    inputs = artifacts.sha256_file(records_path)
    cfg_digest = _scoped_digest(config, ())
    target = report_dir / "metrics.json"
    if _maybe_skip(target, inputs, cfg_digest, args.force):
        return 0
    artifacts.atomic_write_text(
        target,
        json.dumps([report.to_dict() for report in reports], indent=2, sort_keys=True) + "\n",
    )
    artifacts.atomic_write_text(report_dir / "metrics.tsv", evalkit.sweep_table(reports))
    _record(target, "eval", inputs, cfg_digest)
    print(evalkit.sweep_table(reports), end="")
    return 0


def cmd_report(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    metrics_path = _require(out / "report" / "metrics.json", "metric reports", "eval")
    loaded = json.loads(metrics_path.read_text(encoding="utf-8"))
    reports = [
        evalkit.MetricReport(
            pipeline=entry["pipeline"],
            k_or_m=entry["k_or_m"],
            per_item=entry["per_item"],
            aggregates=entry["aggregates"],
        )
        for entry in loaded
    ]
    artifacts.atomic_write_text(out / "report" / "sweep.tsv", evalkit.sweep_table(reports))
    plots = evalkit.sweep_plots(reports, out / "report")
    print(f"wrote {out}/report/sweep.tsv and {len(plots)} plot(s)")
    return 0


def _records_for(records, spec: str):
    if ":" in spec:
        name, value = spec.rsplit(":", 1)
        wanted = (name, int(value))
    else:
        candidates = sorted({(r.pipeline, r.k_or_m) for r in records if r.pipeline == spec})
        if not candidates:
            raise CliError(f"no records for pipeline {spec!r}")
        wanted = candidates[0]
    chosen = [r for r in records if (r.pipeline, r.k_or_m) == wanted]
    if not chosen:
        raise CliError(f"no records for group {wanted}")
    return chosen


def cmd_analyze_z(args) -> int:
    config = _load_config(args.config)
    out = _out(config)
    records_path = _require(out / "records.jsonl", "run records", "run")
    bench = _load_benches(out, ("deep", "multi"))
    records = pipelines_mod.load_run_records(records_path)
    base = _records_for(records, args.base)
    augmented = _records_for(records, args.augmented)
    samples = evalkit.flip_label_samples(base, augmented, bench)
    rows = evalkit.z_scores(samples, min_count=args.min_count)
    report_dir = out / "report"
    report_dir.mkdir(parents=True, exist_ok=True)
    lines = ["word\tcount\tp_hat\tz"]
    lines += [f"{row.word}\t{row.count}\t{row.p_hat:.6f}\t{row.z:.6f}" for row in rows]
    target = report_dir / "zscores.tsv"
    artifacts.atomic_write_text(target, "\n".join(lines) + "\n")
    shown = rows[:5] + ([] if len(rows) <= 10 else rows[-5:])
    for row in shown:
        print(f"{row.z:+8.3f}  n={row.count:<4d}  {row.word}")
    print(f"wrote {target} ({len(rows)} word(s) from {len(samples)} flip sample(s))")
    return 0


def cmd_synth(args) -> int:
    world = synth.build_oracle_world(n_docs=args.docs, seed=args.seed)
    world_dir = Path(args.out) / "world"
    paths = synth.write_world(world, world_dir)
    config = synth.make_run_config(paths, str(Path(args.out) / "out"))
    config_path = Path(args.out) / "config.yaml"
    config_path.parent.mkdir(parents=True, exist_ok=True)
    config_path.write_text(yaml.safe_dump(config, sort_keys=False), encoding="utf-8")
    print(f"wrote {config_path} and a {args.docs}-document world under {world_dir}")
    print("next: insightpipe extract --config", config_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="insightpipe",
        description="Insight-driven RAG: benchmarks, pipelines, evaluation.",
        epilog="Values in the --config file take precedence over flags.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="YAML/JSON run config")
        p.add_argument("--force", action="store_true", help="rebuild even when up to date")
        return p

    common(sub.add_parser("ingest", help="validate corpus and matching files")).set_defaults(fn=cmd_ingest)
    common(sub.add_parser("extract", help="extract and normalize triples")).set_defaults(fn=cmd_extract)
    bench = common(sub.add_parser("build-bench", help="build deep/multi/matching benchmarks"))
    bench.add_argument("--review", help="apply an edited review TSV")
    bench.set_defaults(fn=cmd_build_bench)

    index = sub.add_parser("index", help="vector index operations")
    index_sub = index.add_subparsers(dest="index_command", required=True)
    build = common(index_sub.add_parser("build", help="embed units into an index"))
    build.add_argument("--granularity", choices=retrieval.GRANULARITIES, default="document")
    build.set_defaults(fn=cmd_index_build)
    query = common(index_sub.add_parser("query", help="ad-hoc top-k query"))
    query.add_argument("--granularity", choices=retrieval.GRANULARITIES, default="document")
    query.add_argument("--text", required=True)
    query.add_argument("-k", type=int, default=5)
    query.set_defaults(fn=cmd_index_query)
    ieval = common(index_sub.add_parser("eval", help="retriever Hits@K / MRR over the benchmarks"))
    ieval.add_argument("--granularity", choices=retrieval.GRANULARITIES, default="document")
    ieval.set_defaults(fn=cmd_index_eval)

    run = common(sub.add_parser("run", help="run answer pipelines over the benchmarks"))
    run.add_argument("--pipelines", nargs="+", choices=pipelines_mod.PIPELINES)
    run.set_defaults(fn=cmd_run)
    common(sub.add_parser("eval", help="score run records")).set_defaults(fn=cmd_eval)
    common(sub.add_parser("report", help="sweep table and plots")).set_defaults(fn=cmd_report)
    zp = common(sub.add_parser("analyze-z", help="word-level z-scores over correctness flips"))
    zp.add_argument("--base", default="vanilla", help="base group, pipeline[:k_or_m]")
    zp.add_argument("--augmented", default="insight", help="augmented group, pipeline[:k_or_m]")
    zp.add_argument("--min-count", type=int, default=3)
    zp.set_defaults(fn=cmd_analyze_z)

    synth_p = sub.add_parser("synth", help="generate an offline demo world and config")
    synth_p.add_argument("--out", required=True)
    synth_p.add_argument("--docs", type=int, default=120)
    synth_p.add_argument("--seed", type=int, default=0)
    synth_p.set_defaults(fn=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except _ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
