"""Answer and retrieval metrics, and report assembly.

Answer metrics: exact match, cover exact match (substring containment of
a normalized gold in the normalized prediction, so cover_em >= em
pointwise), and the min(1, matches/3) annotator-panel score.

Retrieval metrics key on entity ids carried in KB metadata where
available (recall@k, cumulative recall over iteration prefixes) and fall
back to pseudo-relevance (a normalized gold answer appearing inside a
top-k passage) otherwise.

All metrics are pure functions; a report recomputed from persisted run
dumps equals the live-run report field for field.
"""

from __future__ import annotations

import json
import re
import string
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

from .errors import GoldMismatchError, UnknownDocIdError
from .kbstore import KbIndex
from .pipeline import RunResult, Sample
from .search import ScoredHit, dedup_merge

REPORT_SCHEMA_VERSION = 1

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_ARTICLE_RE = re.compile(r"^(?:(?:a|an|the)\s+)+")


def normalize_answer(s: str) -> str:
    """Lowercase, strip punctuation, collapse whitespace, drop leading
    articles."""
    s = s.lower().translate(_PUNCT_TABLE)
    s = " ".join(s.split())
    return _ARTICLE_RE.sub("", s)


def exact_match(prediction: str, golds: Sequence[str]) -> int:
    """1 iff the normalized prediction equals some normalized gold.

    A gold that normalizes to empty is degenerate and matches nothing
    (keeps cover_em >= exact_match even for empty predictions).
    """
    pred = normalize_answer(prediction)
    return int(any(pred == g for g in map(normalize_answer, golds) if g))


def cover_em(prediction: str, golds: Sequence[str]) -> int:
    """1 iff some normalized gold occurs inside the normalized prediction.

    Substring semantics: "Parisian" covers gold "paris". An empty
    normalized gold never matches.
    """
    pred = normalize_answer(prediction)
    for g in golds:
        g_norm = normalize_answer(g)
        if g_norm and g_norm in pred:
            return 1
    return 0


def vqa_score(prediction: str, annotator_answers: Sequence[str]) -> float:
    """min(1, matches/3) against the annotator panel."""
    pred = normalize_answer(prediction)
    matches = sum(1 for a in annotator_answers if normalize_answer(a) == pred)
    return min(1.0, matches / 3.0)


def _entity_or_raise(kb_entity_of: Callable[[str], str | None], doc_id: str) -> str | None:
    try:
        return kb_entity_of(doc_id)
    except KeyError:
        raise UnknownDocIdError(doc_id) from None


def recall_at_k(hits: Sequence[ScoredHit], gold_entity_ids: Sequence[str],
                kb_entity_of: Callable[[str], str | None], k: int) -> int:
    """1 iff any of the top-k hits maps to a gold entity id."""
    golds = set(gold_entity_ids)
    for h in hits[:k]:
        ent = _entity_or_raise(kb_entity_of, h.doc_id)
        if ent is not None and ent in golds:
            return 1
    return 0


def prr_at_k(hits: Sequence[ScoredHit], gold_answers: Sequence[str],
             passage_text_of: Callable[[str], str], k: int) -> int:
    """1 iff any top-k passage contains a normalized gold answer."""
    gold_norms = [g for g in (normalize_answer(a) for a in gold_answers) if g]
    for h in hits[:k]:
        try:
            text = passage_text_of(h.doc_id)
        except KeyError:
            raise UnknownDocIdError(h.doc_id) from None
        text_norm = normalize_answer(text)
        if any(g in text_norm for g in gold_norms):
            return 1
    return 0


def cumulative_recall(run: RunResult, gold_entity_ids: Sequence[str],
                      kb_entity_of: Callable[[str], str | None],
                      k_per_iter: int) -> list[int]:
    """Entry i is 1 iff the union of each iteration's top-k multimodal
    hits through iteration i contains a gold entity. Monotone by
    construction."""
    golds = set(gold_entity_ids)
    found = 0
    out: list[int] = []
    for trace in run.traces:
        for h in trace.mm_hits[:k_per_iter]:
            ent = _entity_or_raise(kb_entity_of, h.doc_id)
            if ent is not None and ent in golds:
                found = 1
                break
        out.append(found)
    return out


# Pluggable answer-equivalence judge: (prediction, golds, question) -> score
# in [0, 1]. Trained equivalence models plug in here; the reference
# implementation reuses substring containment.
AnswerJudge = Callable[[str, Sequence[str], str], float]


def cover_em_judge(prediction: str, golds: Sequence[str], question: str) -> float:
    return float(cover_em(prediction, golds))


class KbLookup:
    """Maps doc_ids back to entity ids and passage text across the loaded
    KBs (dict-backed fallbacks serve tests)."""

    def __init__(self, text_kb: KbIndex | None = None, mm_kb: KbIndex | None = None,
                 entities: dict[str, str | None] | None = None,
                 texts: dict[str, str] | None = None):
        self.text_kb = text_kb
        self.mm_kb = mm_kb
        self.entities = entities or {}
        self.texts = texts or {}

    def entity_of(self, doc_id: str) -> str | None:
        if self.mm_kb is not None and doc_id in self.mm_kb:
            return self.mm_kb.entity_of(doc_id)
        if self.text_kb is not None and doc_id in self.text_kb:
            return self.text_kb.entity_of(doc_id)
        if doc_id in self.entities:
            return self.entities[doc_id]
        raise UnknownDocIdError(doc_id)

    def passage_text_of(self, doc_id: str) -> str:
        if self.text_kb is not None and doc_id in self.text_kb:
            return self.text_kb.text_of(doc_id)
        if self.mm_kb is not None and doc_id in self.mm_kb:
            return self.mm_kb.text_of(doc_id)
        if doc_id in self.texts:
            return self.texts[doc_id]
        raise UnknownDocIdError(doc_id)


@dataclass
class ReportConfig:
    recall_ks: tuple[int, ...] = (5, 10, 20)
    prr_ks: tuple[int, ...] = (5, 10, 20)
    k_per_iter: int = 5
    echo: dict = field(default_factory=dict)


@dataclass
class MetricReport:
    samples: list[dict]
    aggregates: dict
    config: dict
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "config": self.config,
            "aggregates": self.aggregates,
            "samples": self.samples,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False)


def _pooled_hits(run: RunResult, source_attr: str) -> list[ScoredHit]:
    """All iterations' hits for one KB, deduplicated by max score."""
    hit_lists = [getattr(t, source_attr) for t in run.traces]
    total = sum(len(h) for h in hit_lists)
    return dedup_merge(hit_lists, cap=total)


def _mean(values: list) -> float:
    return sum(values) / len(values)


def build_report(results: Iterable[RunResult], golds: dict[str, Sample],
                 kb_lookup: KbLookup, config: ReportConfig | None = None,
                 judge: AnswerJudge | None = None) -> MetricReport:
    """Score a result stream against gold data.

    Failed samples score 0 on answer metrics and keep retrieval metrics
    from whatever traces completed; they are dropped from retrieval
    aggregates only when no trace exists. Samples without gold entity
    ids skip the entity-recall columns. A ``judge`` adds a judge_score
    column scored per sample.
    """
    config = config or ReportConfig()
    results = list(results)
    if not results:
        raise ValueError("no results to score")

    rows: list[dict] = []
    for run in results:
        gold = golds.get(run.sample_id)
        if gold is None:
            raise GoldMismatchError(run.sample_id)

        row: dict = {"sample_id": run.sample_id, "failed": run.failed}
        if run.failed:
            row["em"] = 0
            row["cover_em"] = 0
            row["vqa_score"] = 0.0 if gold.annotator_answers else None
            if judge is not None:
                row["judge_score"] = 0.0
        else:
            row["em"] = exact_match(run.answer, gold.gold_answers)
            row["cover_em"] = cover_em(run.answer, gold.gold_answers)
            row["vqa_score"] = (vqa_score(run.answer, gold.annotator_answers)
                                if gold.annotator_answers else None)
            if judge is not None:
                row["judge_score"] = float(judge(run.answer, gold.gold_answers,
                                                 gold.question))

        has_traces = bool(run.traces)
        score_recall = has_traces and bool(gold.gold_entity_ids)
        if score_recall:
            mm_pool = _pooled_hits(run, "mm_hits")
            row["recall_at"] = {
                str(k): recall_at_k(mm_pool, gold.gold_entity_ids,
                                    kb_lookup.entity_of, k)
                for k in config.recall_ks
            }
            row["cumulative_recall_by_iter"] = cumulative_recall(
                run, gold.gold_entity_ids, kb_lookup.entity_of, config.k_per_iter)
        else:
            row["recall_at"] = None
            row["cumulative_recall_by_iter"] = None

        if has_traces:
            text_pool = _pooled_hits(run, "text_hits")
            row["prr_at"] = {
                str(k): prr_at_k(text_pool, gold.gold_answers,
                                 kb_lookup.passage_text_of, k)
                for k in config.prr_ks
            }
        else:
            row["prr_at"] = None
        rows.append(row)

    aggregates: dict = {
        "n_samples": len(rows),
        "n_failed": sum(1 for r in rows if r["failed"]),
    }
    answer_cols = ["em", "cover_em", "vqa_score"]
    if judge is not None:
        answer_cols.append("judge_score")
    for col in answer_cols:
        vals = [r[col] for r in rows if r.get(col) is not None]
        aggregates[col] = _mean(vals) if vals else None
    for k in config.recall_ks:
        vals = [r["recall_at"][str(k)] for r in rows if r["recall_at"] is not None]
        aggregates[f"recall@{k}"] = _mean(vals) if vals else None
    for k in config.prr_ks:
        vals = [r["prr_at"][str(k)] for r in rows if r["prr_at"] is not None]
        aggregates[f"prr@{k}"] = _mean(vals) if vals else None

    cumulative_lists = [r["cumulative_recall_by_iter"] for r in rows
                        if r["cumulative_recall_by_iter"]]
    if cumulative_lists:
        depth = max(len(c) for c in cumulative_lists)
        # Shorter (partially failed) runs stop retrieving, so their last
        # value carries forward.
        padded = [c + [c[-1]] * (depth - len(c)) for c in cumulative_lists]
        aggregates["cumulative_recall_by_iter"] = [
            _mean([p[i] for p in padded]) for i in range(depth)
        ]
    else:
        aggregates["cumulative_recall_by_iter"] = None

    return MetricReport(samples=rows, aggregates=aggregates,
                        config=dict(config.echo))


def format_table(report: MetricReport) -> str:
    """Human-readable aggregate table."""
    agg = report.aggregates
    lines = ["metric                        value",
             "-" * 40]

    def fmt(name: str, value) -> str:
        if value is None:
            return f"{name:<28}  -"
        return f"{name:<28}  {value:.4f}"

    lines.append(fmt("em", agg.get("em")))
    lines.append(fmt("cover_em", agg.get("cover_em")))
    lines.append(fmt("vqa_score", agg.get("vqa_score")))
    at_keys = [k for k in agg if k.startswith(("recall@", "prr@"))]
    for key in sorted(at_keys, key=lambda k: (k.split("@")[0], int(k.split("@")[1]))):
        lines.append(fmt(key, agg[key]))
    cumulative = agg.get("cumulative_recall_by_iter")
    if cumulative:
        for i, v in enumerate(cumulative):
            lines.append(fmt(f"cumulative_recall[iter {i}]", v))
    lines.append(f"{'samples':<28}  {agg['n_samples']}")
    lines.append(f"{'failed':<28}  {agg['n_failed']}")
    return "\n".join(lines)
