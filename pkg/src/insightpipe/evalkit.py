"""Metrics: answer matching, token F1, judge scores, and z-score analysis.

All lexical metrics share one normalization: case folding, whitespace
collapsing, and stripping punctuation from token edges.  Exact match
asks whether the gold appears as a contiguous run of whole tokens in
the prediction (substring matching across token boundaries would let
"art" match "state of the art house", and would let a prediction score
EM 1 with zero token overlap).  F1 is the standard token-overlap
harmonic mean.  Multi-gold items average each metric over their golds.
"""

from __future__ import annotations

import logging
import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field

from . import gateway

logger = logging.getLogger(__name__)

__all__ = [
    "MetricError",
    "ZScoreError",
    "normalize_text",
    "answer_tokens",
    "contains_answer",
    "exact_match",
    "token_f1",
    "miner_recall_at_k",
    "judge_insight_similarity",
    "FlipSample",
    "flip_label_samples",
    "ZRow",
    "z_scores",
    "MetricReport",
    "aggregate",
    "record_is_correct",
]


class MetricError(ValueError):
    """Raised for malformed metric inputs."""


class ZScoreError(ValueError):
    """Raised when the z-score analysis cannot be computed."""


def answer_tokens(text: str) -> list[str]:
    """Normalized token list: case-folded, edge punctuation stripped."""
    tokens = []
    for token in text.casefold().split():
        token = token.strip(string.punctuation)
        if token:
            tokens.append(token)
    return tokens


def normalize_text(text: str) -> str:
    return " ".join(answer_tokens(text))


def _contains_run(haystack: list[str], needle: list[str]) -> bool:
    if not needle:
        return not haystack
    if len(needle) > len(haystack):
        return False
    for start in range(len(haystack) - len(needle) + 1):
        if haystack[start : start + len(needle)] == needle:
            return True
    return False


def contains_answer(text: str, gold: str) -> bool:
    """True when the normalized gold occurs as a whole-token run in text."""
    return _contains_run(answer_tokens(text), answer_tokens(gold))


def exact_match(golds, prediction: str) -> float:
    """Fraction of golds present in the prediction (1.0 or 0.0 for one gold)."""
    golds = list(golds)
    if not golds:
        raise MetricError("exact_match needs at least one gold answer")
    pred_tokens = answer_tokens(prediction)
    total = sum(1.0 if _contains_run(pred_tokens, answer_tokens(g)) else 0.0 for g in golds)
    return total / len(golds)


def _f1_single(gold_tokens: list[str], pred_tokens: list[str]) -> float:
    if not gold_tokens and not pred_tokens:
        return 1.0
    if not gold_tokens or not pred_tokens:
        return 0.0
    common = sum((Counter(gold_tokens) & Counter(pred_tokens)).values())
    if common == 0:
        return 0.0
    precision = common / len(pred_tokens)
    recall = common / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def token_f1(golds, prediction: str) -> float:
    """Token-overlap F1, averaged over golds for multi-answer items."""
    golds = list(golds)
    if not golds:
        raise MetricError("token_f1 needs at least one gold answer")
    pred_tokens = answer_tokens(prediction)
    return sum(_f1_single(answer_tokens(g), pred_tokens) for g in golds) / len(golds)


def miner_recall_at_k(golds, completions: list[str], k: int) -> float:
    """Fraction of golds found in the first ``k`` miner completions."""
    if k < 1:
        raise MetricError(f"k must be at least 1, got {k}")
    golds = list(golds)
    if not golds:
        raise MetricError("miner_recall_at_k needs at least one gold answer")
    window = completions[:k]
    found = sum(1.0 if any(contains_answer(c, g) for c in window) else 0.0 for g in golds)
    return found / len(golds)


_SCORE_RE = re.compile(r"Score:\s*<?\s*(0\.5|1(?:\.0)?|0(?:\.0)?)", re.IGNORECASE)


def judge_insight_similarity(
    target: str,
    generated: str,
    judge: "gateway.ModelHandle",
    log: list | None = None,
    template: str | None = None,
) -> float:
    """Ask the judge model how close two sentence fragments are.

    The reply must carry a ``Score:`` line with 0, 0.5, or 1.  A reply
    that does not parse triggers one corrective reprompt before failing.
    """
    if template is None:
        template = gateway.load_prompt("insight_eval")
    prompt = gateway.render_prompt(template, target, generated)
    reply = gateway.chat(judge, [("user", prompt)], log=log).text
    match = _SCORE_RE.search(reply)
    if match is None:
        messages = [
            ("user", prompt),
            ("assistant", reply),
            ("user", "Reply with exactly one line of the form Score: <0, 0.5, or 1)>"),
        ]
        reply = gateway.chat(judge, messages, log=log).text
        match = _SCORE_RE.search(reply)
        if match is None:
            raise MetricError(f"judge reply has no parseable score: {reply[:120]!r}")
    return float(match.group(1))


# --------------------------------------------------------------------------
# correctness flips and z-scores


@dataclass(frozen=True)
class FlipSample:
    """One augmentation-changed item: its insight text and flip direction.

    ``label`` is 1 when augmentation flipped the item from incorrect to
    correct, 0 for the opposite flip; unchanged items never become
    samples.
    """

    item_id: str
    text: str
    label: int


def record_is_correct(record, item) -> bool:
    """Binary correctness: all golds present (QA) or label matched (matching)."""
    if item.kind == "matching":
        gold = "Yes" if item.pair[2] else "No"
        return record.parsed_answer.strip().casefold() == gold.casefold()
    return exact_match(item.golds, record.parsed_answer) == 1.0


def flip_label_samples(base_records, aug_records, bench) -> list[FlipSample]:
    """Pair base/augmented runs by item and keep correctness flips.

    The sample text is the insight material (fragments and completions)
    the augmented run used, which is what the z-scores attribute the
    flip to.
    """
    items = {item.id: item for item in bench}
    base_by_id = {record.item_id: record for record in base_records}
    samples: list[FlipSample] = []
    for aug in aug_records:
        base = base_by_id.get(aug.item_id)
        item = items.get(aug.item_id)
        if base is None or item is None or item.kind == "matching":
            continue
        before = record_is_correct(base, item)
        after = record_is_correct(aug, item)
        if before == after:
            continue
        text = " ".join(f"{fragment} {completion}" for fragment, completion in aug.insights)
        samples.append(FlipSample(item_id=aug.item_id, text=text, label=int(after)))
    return samples


@dataclass(frozen=True)
class ZRow:
    word: str
    count: int
    p_hat: float
    z: float


_WORD_RE = re.compile(r"[a-z]+")


def z_scores(samples: list[FlipSample], min_count: int = 3) -> list[ZRow]:
    """Per-word one-proportion z-test against the sample base rate.

    For each word appearing in at least ``min_count`` samples, compare
    the helpful-flip rate among samples containing it with the overall
    rate p0 via z = (p_hat - p0) / sqrt(p0 (1 - p0) / n).  Degenerate
    prior (all flips one way, or no samples) is an error, not a silent
    zero.  Rows come back sorted by descending z, then word.
    """
    if not samples:
        raise ZScoreError("no flip samples to analyze")
    p0 = sum(sample.label for sample in samples) / len(samples)
    if p0 <= 0.0 or p0 >= 1.0:
        raise ZScoreError(f"degenerate label prior p0={p0}: all flips go one way")
    present: Counter[str] = Counter()
    helpful: Counter[str] = Counter()
    for sample in samples:
        words = set(_WORD_RE.findall(sample.text.lower()))
        for word in words:
            present[word] += 1
            if sample.label == 1:
                helpful[word] += 1
    rows: list[ZRow] = []
    for word, count in present.items():
        if count < min_count:
            continue
        p_hat = helpful[word] / count
        z = (p_hat - p0) / math.sqrt(p0 * (1.0 - p0) / count)
        rows.append(ZRow(word=word, count=count, p_hat=p_hat, z=z))
    rows.sort(key=lambda row: (-row.z, row.word))
    return rows


# --------------------------------------------------------------------------
# aggregation


@dataclass
class MetricReport:
    """Scores for one (pipeline, k_or_m) group of run records."""

    pipeline: str
    k_or_m: int
    per_item: list[dict]
    aggregates: dict

    def to_dict(self) -> dict:
        return {
            "pipeline": self.pipeline,
            "k_or_m": self.k_or_m,
            "aggregates": self.aggregates,
            "per_item": self.per_item,
        }


def aggregate(records, bench) -> MetricReport:
    """Score one uniform group of records against its benchmark.

    Deep items aggregate to mean EM/F1; multi items to their averaged
    variants; matching items to accuracy.  The group must be non-empty
    and share one (pipeline, k_or_m).
    """
    records = list(records)
    if not records:
        raise MetricError("no records to aggregate")
    items = {item.id: item for item in bench}
    groups = {(record.pipeline, record.k_or_m) for record in records}
    if len(groups) > 1:
        raise MetricError(f"records span multiple groups: {sorted(groups)}")
    pipeline, k_or_m = next(iter(groups))

    per_item: list[dict] = []
    deep_em: list[float] = []
    deep_f1: list[float] = []
    multi_em: list[float] = []
    multi_f1: list[float] = []
    matching_correct: list[bool] = []
    fallbacks = 0
    for record in records:
        item = items.get(record.item_id)
        if item is None:
            raise MetricError(f"record references unknown item {record.item_id!r}")
        row: dict = {"item_id": record.item_id, "kind": item.kind}
        if record.fallback_vanilla:
            fallbacks += 1
        if item.kind == "matching":
            correct = record_is_correct(record, item)
            matching_correct.append(correct)
            row["correct"] = correct
        else:
            em = exact_match(item.golds, record.parsed_answer)
            f1 = token_f1(item.golds, record.parsed_answer)
            row["em"] = em
            row["f1"] = f1
            if item.kind == "deep":
                deep_em.append(em)
                deep_f1.append(f1)
            else:
                multi_em.append(em)
                multi_f1.append(f1)
        per_item.append(row)

    aggregates: dict = {
        "n_deep": len(deep_em),
        "n_multi": len(multi_em),
        "n_matching": len(matching_correct),
        "fallback_vanilla": fallbacks,
    }
    if deep_em:
        aggregates["em"] = sum(deep_em) / len(deep_em)
        aggregates["f1"] = sum(deep_f1) / len(deep_f1)
    if multi_em:
        aggregates["avg_em"] = sum(multi_em) / len(multi_em)
        aggregates["avg_f1"] = sum(multi_f1) / len(multi_f1)
    if matching_correct:
        aggregates["accuracy"] = sum(matching_correct) / len(matching_correct)
    return MetricReport(pipeline=pipeline, k_or_m=k_or_m, per_item=per_item, aggregates=aggregates)


_SWEEP_COLUMNS = ("em", "f1", "avg_em", "avg_f1", "accuracy")


def sweep_table(reports: list[MetricReport]) -> str:
    """Render reports as a TSV sweep table, sorted by pipeline then k/m."""
    header = ["pipeline", "k_or_m", "n_deep", "n_multi", "n_matching", *_SWEEP_COLUMNS]
    lines = ["\t".join(header)]
    for report in sorted(reports, key=lambda r: (r.pipeline, r.k_or_m)):
        row = [
            report.pipeline,
            str(report.k_or_m),
            str(report.aggregates.get("n_deep", 0)),
            str(report.aggregates.get("n_multi", 0)),
            str(report.aggregates.get("n_matching", 0)),
        ]
        for column in _SWEEP_COLUMNS:
            value = report.aggregates.get(column)
            row.append("" if value is None else f"{value:.4f}")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def sweep_plots(reports: list[MetricReport], out_dir) -> list[str]:
    """Write one metric-vs-sweep-value PNG per populated metric column."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from pathlib import Path

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []
    for column in _SWEEP_COLUMNS:
        series: dict[str, list[tuple[int, float]]] = {}
        for report in reports:
            value = report.aggregates.get(column)
            if value is None:
                continue
            series.setdefault(report.pipeline, []).append((report.k_or_m, value))
        if not series:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for pipeline in sorted(series):
            points = sorted(series[pipeline])
            ax.plot([p[0] for p in points], [p[1] for p in points], marker="o", label=pipeline)
        ax.set_xlabel("k (retrieved) / m (insights)")
        ax.set_ylabel(column)
        ax.set_ylim(-0.05, 1.05)
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        path = out_dir / f"plot_{column}.png"
        fig.savefig(path)
        plt.close(fig)
        written.append(str(path))
    return written
