"""End-to-end answer pipelines and their run records.

Four ways to answer a benchmark item:

* ``vanilla``      — the generator sees only the question.
* ``rag_doc``      — top-k retrieved abstracts become the context.
* ``rag_triple``   — top-k retrieved triple strings become the context.
* ``insight``      — an identifier model distills the question into
  sentence fragments, a miner model completes each fragment from its
  internalized corpus, and the completions become the context.

Every pipeline invocation yields one :class:`RunRecord` holding the
exact prompts sent, the raw model outputs, and usage totals, so runs
can be audited, scored, and replayed offline.
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import gateway
from .artifacts import atomic_write_jsonl
from .benchbuild import BenchmarkItem
from .corpus import CorpusHandle
from .retrieval import EmbedderConfig, VectorIndex, top_k

logger = logging.getLogger(__name__)

__all__ = [
    "PipelineError",
    "InsightParseError",
    "MatchingParseError",
    "InsightQuery",
    "RunRecord",
    "identify_insights",
    "run_vanilla",
    "run_rag",
    "run_insight_rag",
    "run_matching",
    "run_suite",
    "save_run_records",
    "load_run_records",
    "replay_record",
]

PIPELINES = ("vanilla", "rag_doc", "rag_triple", "insight")


class PipelineError(RuntimeError):
    """Raised when a pipeline stage cannot proceed."""


class InsightParseError(PipelineError):
    """Raised when identifier output is not a parseable insight list."""


class MatchingParseError(PipelineError):
    """Raised when a matching reply carries no Yes/No answer."""


@dataclass(frozen=True)
class InsightQuery:
    """One identified insight: a fragment to complete, maybe plural."""

    fragment: str
    multi_answer: bool = False


@dataclass
class RunRecord:
    """Everything one pipeline invocation sent, received, and decided."""

    item_id: str
    pipeline: str
    k_or_m: int
    fallback_vanilla: bool
    parsed_answer: str
    insights: list[tuple[str, str]]
    prompts: list[str]
    raw_outputs: list[str]
    stages: list[str]
    prompt_tokens: int
    completion_tokens: int
    timing_ms: float

    def to_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "pipeline": self.pipeline,
            "k_or_m": self.k_or_m,
            "fallback_vanilla": self.fallback_vanilla,
            "parsed_answer": self.parsed_answer,
            "insights": [list(pair) for pair in self.insights],
            "prompts": self.prompts,
            "raw_outputs": self.raw_outputs,
            "stages": self.stages,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "timing_ms": self.timing_ms,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "RunRecord":
        return cls(
            item_id=record["item_id"],
            pipeline=record["pipeline"],
            k_or_m=record["k_or_m"],
            fallback_vanilla=record.get("fallback_vanilla", False),
            parsed_answer=record["parsed_answer"],
            insights=[tuple(pair) for pair in record.get("insights", [])],
            prompts=record.get("prompts", []),
            raw_outputs=record.get("raw_outputs", []),
            stages=record.get("stages", []),
            prompt_tokens=record.get("prompt_tokens", 0),
            completion_tokens=record.get("completion_tokens", 0),
            timing_ms=record.get("timing_ms", 0.0),
        )


def _finish(
    item: BenchmarkItem,
    pipeline: str,
    k_or_m: int,
    parsed: str,
    log: list,
    insights: list[tuple[str, str]] | None = None,
    fallback: bool = False,
) -> RunRecord:
    return RunRecord(
        item_id=item.id,
        pipeline=pipeline,
        k_or_m=k_or_m,
        fallback_vanilla=fallback,
        parsed_answer=parsed,
        insights=list(insights or []),
        prompts=[c.prompt for c in log],
        raw_outputs=[c.response for c in log],
        stages=[c.role for c in log],
        prompt_tokens=sum(c.prompt_tokens for c in log),
        completion_tokens=sum(c.completion_tokens for c in log),
        timing_ms=sum(c.latency_ms for c in log),
    )


# --------------------------------------------------------------------------
# insight identification


_PY_LITERALS = ((re.compile(r"\bTrue\b"), "true"), (re.compile(r"\bFalse\b"), "false"), (re.compile(r"\bNone\b"), "null"))


def _parse_insight_list(text: str) -> list[dict]:
    start, end = text.find("["), text.rfind("]")
    if start < 0 or end <= start:
        raise ValueError("no bracketed list in reply")
    blob = text[start : end + 1]
    try:
        parsed = json.loads(blob)
    except json.JSONDecodeError:
        for pattern, replacement in _PY_LITERALS:
            blob = pattern.sub(replacement, blob)
        parsed = json.loads(blob)
    if not isinstance(parsed, list) or not all(isinstance(e, dict) for e in parsed):
        raise ValueError("reply is not a list of dictionaries")
    return parsed


def _to_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().casefold() == "true"
    return bool(value)


def identify_insights(
    task_text: str,
    identifier: gateway.ModelHandle,
    template: str | None = None,
    log: list | None = None,
) -> list[InsightQuery]:
    """Distill a task into sentence fragments for the miner to complete.

    The identifier replies with a JSON-like list of dictionaries; an
    unparseable reply triggers one corrective reprompt before raising
    :class:`InsightParseError`.  An empty-dictionary list means "no
    insight applies" and yields an empty result.  Fragments lose any
    terminal punctuation so they end mid-sentence.
    """
    if template is None:
        template = gateway.load_prompt("identifier")
    prompt = gateway.render_prompt(template, task_text)
    reply = gateway.chat(identifier, [("user", prompt)], log=log).text
    try:
        entries = _parse_insight_list(reply)
    except ValueError:
        messages = [
            ("user", prompt),
            ("assistant", reply),
            ("user", "Return only the JSON-like list of dictionaries, nothing else."),
        ]
        reply = gateway.chat(identifier, messages, log=log).text
        try:
            entries = _parse_insight_list(reply)
        except ValueError as exc:
            raise InsightParseError(f"identifier output unparseable: {reply[:200]!r}") from exc
    queries: list[InsightQuery] = []
    for entry in entries:
        fragment = str(entry.get("Insight", "")).strip()
        fragment = fragment.rstrip(".?!…").rstrip()
        if not fragment:
            continue
        queries.append(InsightQuery(fragment=fragment, multi_answer=_to_bool(entry.get("Multi-answer", False))))
    return queries


def _mine_context(
    insights: list[InsightQuery],
    miner: gateway.ModelHandle,
    n_samples: int | None,
    log: list,
) -> tuple[list[str], list[tuple[str, str]]]:
    lines: list[str] = []
    pairs: list[tuple[str, str]] = []
    for query in insights:
        n = n_samples if n_samples is not None else (10 if query.multi_answer else 1)
        completions = gateway.complete_insight(miner, query.fragment, n_samples=n, log=log)
        distinct: list[str] = []
        for completion in completions:
            if completion not in distinct:
                distinct.append(completion)
        for completion in distinct:
            lines.append(f"{query.fragment} → {completion}")
            pairs.append((query.fragment, completion))
    return lines, pairs


# --------------------------------------------------------------------------
# question-answering pipelines


def run_vanilla(
    item: BenchmarkItem,
    generator: gateway.ModelHandle,
    template: str | None = None,
    log: list | None = None,
) -> RunRecord:
    """Answer from the question alone."""
    if template is None:
        template = gateway.load_prompt("qa")
    local: list = []
    prompt = gateway.render_prompt(template, item.question)
    parsed = gateway.chat(generator, [("user", prompt)], log=local).text.strip()
    if log is not None:
        log.extend(local)
    return _finish(item, "vanilla", 0, parsed, local)


def run_rag(
    item: BenchmarkItem,
    index: VectorIndex,
    k: int,
    generator: gateway.ModelHandle,
    embedder: EmbedderConfig,
    template: str | None = None,
    log: list | None = None,
) -> RunRecord:
    """Answer with the top-k retrieved payloads as context.

    The context block joins payloads in rank order with blank lines, so
    a k-item context always has exactly k segments.
    """
    if template is None:
        template = gateway.load_prompt("augmented_qa")
    result = top_k(index, item.question, k, embedder)
    context = "\n\n".join(index.payload(unit_id) for unit_id, _ in result.ranked)
    local: list = []
    prompt = gateway.render_prompt(template, item.question, context)
    parsed = gateway.chat(generator, [("user", prompt)], log=local).text.strip()
    if log is not None:
        log.extend(local)
    pipeline = "rag_doc" if index.granularity == "document" else "rag_triple"
    return _finish(item, pipeline, k, parsed, local)


def run_insight_rag(
    item: BenchmarkItem,
    identifier: gateway.ModelHandle,
    miner: gateway.ModelHandle,
    generator: gateway.ModelHandle,
    m: int = 1,
    n_samples: int | None = None,
    templates: dict[str, str] | None = None,
    log: list | None = None,
) -> RunRecord:
    """Answer with mined insight completions as context.

    The first ``m`` identified insights are mined; multi-answer
    fragments draw 10 sampled completions (deduplicated) unless
    ``n_samples`` overrides that.  When the identifier finds nothing,
    the item falls back to the vanilla prompt and the record says so.
    """
    if m < 1:
        raise PipelineError(f"m must be at least 1, got {m}")
    templates = templates or {}
    local: list = []
    insights = identify_insights(
        item.question, identifier, template=templates.get("identifier"), log=local
    )
    used = insights[:m]
    if not used:
        qa_template = templates.get("qa") or gateway.load_prompt("qa")
        prompt = gateway.render_prompt(qa_template, item.question)
        parsed = gateway.chat(generator, [("user", prompt)], log=local).text.strip()
        if log is not None:
            log.extend(local)
        return _finish(item, "insight", m, parsed, local, fallback=True)
    lines, pairs = _mine_context(used, miner, n_samples, local)
    context = "\n".join(lines)
    aug_template = templates.get("augmented_qa") or gateway.load_prompt("augmented_qa")
    prompt = gateway.render_prompt(aug_template, item.question, context)
    parsed = gateway.chat(generator, [("user", prompt)], log=local).text.strip()
    if log is not None:
        log.extend(local)
    return _finish(item, "insight", m, parsed, local, insights=pairs)


# --------------------------------------------------------------------------
# matching pipelines


_ANSWER_RE = re.compile(r'"answer"\s*:\s*"?\s*(yes|no)\b', re.IGNORECASE)


def _parse_yes_no(text: str) -> str | None:
    start, end = text.find("{"), text.rfind("}")
    if 0 <= start < end:
        try:
            data = json.loads(text[start : end + 1])
            answer = str(data.get("answer", "")).strip().casefold()
            if answer in ("yes", "no"):
                return "Yes" if answer == "yes" else "No"
        except json.JSONDecodeError:
            pass
    match = _ANSWER_RE.search(text)
    if match:
        return "Yes" if match.group(1).casefold() == "yes" else "No"
    return None


def _chat_yes_no(handle: gateway.ModelHandle, prompt: str, log: list) -> str:
    reply = gateway.chat(handle, [("user", prompt)], log=log).text
    parsed = _parse_yes_no(reply)
    if parsed is None:
        messages = [
            ("user", prompt),
            ("assistant", reply),
            ("user", 'Respond with only the JSON object: {"explanation": "...", "answer": "Yes" or "No"}'),
        ]
        reply = gateway.chat(handle, messages, log=log).text
        parsed = _parse_yes_no(reply)
        if parsed is None:
            raise MatchingParseError(f"no Yes/No answer in reply: {reply[:200]!r}")
    return parsed


def run_matching(
    item: BenchmarkItem,
    mode: str,
    corpus: CorpusHandle,
    generator: gateway.ModelHandle,
    index: VectorIndex | None = None,
    embedder: EmbedderConfig | None = None,
    identifier: gateway.ModelHandle | None = None,
    miner: gateway.ModelHandle | None = None,
    m: int = 1,
    n_samples: int | None = None,
    templates: dict[str, str] | None = None,
    log: list | None = None,
) -> RunRecord:
    """Decide whether two papers are cite-worthy for each other.

    Modes: ``vanilla`` (abstracts only), ``rag`` (top-1 retrieved
    abstract appended to the Paper-B side; the query concatenates both
    abstracts), ``insight`` (identified + mined insights in the
    augmented template; no insights falls back to vanilla).
    """
    if item.kind != "matching" or item.pair is None:
        raise PipelineError(f"item {item.id} is not a matching item")
    templates = templates or {}
    doc_a, doc_b, _ = item.pair
    abstract_a = corpus.get(doc_a).abstract
    abstract_b = corpus.get(doc_b).abstract
    local: list = []

    if mode == "vanilla":
        template = templates.get("matching") or gateway.load_prompt("matching")
        prompt = gateway.render_prompt(template, abstract_a, abstract_b)
        parsed = _chat_yes_no(generator, prompt, local)
        if log is not None:
            log.extend(local)
        return _finish(item, "vanilla", 0, parsed, local)

    if mode == "rag":
        if index is None or embedder is None:
            raise PipelineError("matching rag mode needs an index and embedder")
        query = f"{abstract_a}\n\n{abstract_b}"
        retrieved = top_k(index, query, 1, embedder)
        payload = index.payload(retrieved.ranked[0][0])
        template = templates.get("matching") or gateway.load_prompt("matching")
        side_b = f"{abstract_b}\n\nContext:\n{payload}"
        prompt = gateway.render_prompt(template, abstract_a, side_b)
        parsed = _chat_yes_no(generator, prompt, local)
        if log is not None:
            log.extend(local)
        return _finish(item, "rag_doc", 1, parsed, local)

    if mode == "insight":
        if identifier is None or miner is None:
            raise PipelineError("matching insight mode needs identifier and miner handles")
        task_text = f"Paper-A:\n{abstract_a}\n\nPaper-B:\n{abstract_b}"
        insights = identify_insights(
            task_text, identifier, template=templates.get("identifier"), log=local
        )
        used = insights[:m]
        if not used:
            template = templates.get("matching") or gateway.load_prompt("matching")
            prompt = gateway.render_prompt(template, abstract_a, abstract_b)
            parsed = _chat_yes_no(generator, prompt, local)
            if log is not None:
                log.extend(local)
            return _finish(item, "insight", m, parsed, local, fallback=True)
        lines, pairs = _mine_context(used, miner, n_samples, local)
        template = templates.get("augmented_matching") or gateway.load_prompt("augmented_matching")
        prompt = gateway.render_prompt(template, abstract_a, abstract_b, "\n".join(lines))
        parsed = _chat_yes_no(generator, prompt, local)
        if log is not None:
            log.extend(local)
        return _finish(item, "insight", m, parsed, local, insights=pairs)

    raise PipelineError(f"unknown matching mode {mode!r}")


# --------------------------------------------------------------------------
# sweep driver and record persistence


def _map_bounded(fn, items, cap: int):
    if cap <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=cap) as pool:
        return list(pool.map(fn, items))


def run_suite(
    bench: list[BenchmarkItem],
    pipelines: list[str],
    handles: dict[str, gateway.ModelHandle],
    corpus: CorpusHandle | None = None,
    doc_index: VectorIndex | None = None,
    triple_index: VectorIndex | None = None,
    embedder: EmbedderConfig | None = None,
    k_values: tuple[int, ...] = (1,),
    m_values: tuple[int, ...] = (1,),
    n_samples: int | None = None,
) -> list[RunRecord]:
    """Run the requested pipelines (with their sweeps) over a benchmark.

    Records come back grouped by (pipeline, sweep value) in the given
    pipeline order, item order within each group.  Work inside a group
    fans out across threads up to the generator's parallelism cap;
    ``map`` semantics keep the output order deterministic.
    """
    unknown = [p for p in pipelines if p not in PIPELINES]
    if unknown:
        raise PipelineError(f"unknown pipeline(s): {unknown}")
    generator = handles.get("generator")
    if generator is None:
        raise PipelineError("a generator handle is required")
    cap = generator.parallelism_cap
    qa_items = [item for item in bench if item.kind in ("deep", "multi")]
    matching_items = [item for item in bench if item.kind == "matching"]
    if matching_items and corpus is None:
        raise PipelineError("matching items require a corpus")

    records: list[RunRecord] = []
    for pipeline in pipelines:
        if pipeline == "vanilla":
            records.extend(_map_bounded(lambda it: run_vanilla(it, generator), qa_items, cap))
            records.extend(
                _map_bounded(
                    lambda it: run_matching(it, "vanilla", corpus, generator), matching_items, cap
                )
            )
        elif pipeline in ("rag_doc", "rag_triple"):
            index = doc_index if pipeline == "rag_doc" else triple_index
            if index is None or embedder is None:
                raise PipelineError(f"{pipeline} requires an index and embedder")
            for k in k_values:
                records.extend(
                    _map_bounded(
                        lambda it, k=k: run_rag(it, index, k, generator, embedder), qa_items, cap
                    )
                )
            if pipeline == "rag_doc" and matching_items:
                records.extend(
                    _map_bounded(
                        lambda it: run_matching(
                            it, "rag", corpus, generator, index=index, embedder=embedder
                        ),
                        matching_items,
                        cap,
                    )
                )
        elif pipeline == "insight":
            identifier = handles.get("identifier")
            miner = handles.get("miner")
            if identifier is None or miner is None:
                raise PipelineError("insight pipeline requires identifier and miner handles")
            for m in m_values:
                records.extend(
                    _map_bounded(
                        lambda it, m=m: run_insight_rag(
                            it, identifier, miner, generator, m=m, n_samples=n_samples
                        ),
                        qa_items,
                        cap,
                    )
                )
                records.extend(
                    _map_bounded(
                        lambda it, m=m: run_matching(
                            it,
                            "insight",
                            corpus,
                            generator,
                            identifier=identifier,
                            miner=miner,
                            m=m,
                            n_samples=n_samples,
                        ),
                        matching_items,
                        cap,
                    )
                )
    return records


def save_run_records(records: list[RunRecord], path: str | Path) -> int:
    return atomic_write_jsonl(path, (record.to_dict() for record in records))


def load_run_records(path: str | Path) -> list[RunRecord]:
    records: list[RunRecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(RunRecord.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise PipelineError(f"{path}:{lineno}: malformed run record ({exc})") from None
    return records


def replay_record(record: RunRecord, handles: dict[str, gateway.ModelHandle]) -> list[str]:
    """Re-send a record's stored prompts; returns the fresh outputs.

    Under deterministic (mock) backends the outputs must equal the
    record's stored ``raw_outputs``; divergence means the backend or
    the stored record changed.
    """
    outputs: list[str] = []
    for stage, prompt in zip(record.stages, record.prompts):
        handle = handles.get(stage)
        if handle is None:
            raise PipelineError(f"no handle for stage {stage!r}")
        outputs.append(gateway.chat(handle, [("user", prompt)]).text)
    return outputs
