"""The iterative retrieve-and-reason orchestrator.

One sample flows through: an initial image description bootstraps the
first expanded query and reasoning record; each refinement iteration
then expands the question with the latest record, generates two
follow-up sub-queries from all accumulated records, joint-searches both
KBs under a fixed budget, and synthesizes the newly retrieved knowledge
into the next record. The final answer is generated from the question,
the image, and the accumulated records only.

Within a sample every step is strictly sequential (record i-1 gates
iteration i); parallelism exists only across samples.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ANSWER_EXACT_ENTITY, RunConfig
from .embed import embed_image
from .errors import (
    ChatTimeoutError,
    MalformedResponseError,
    ParseFailureError,
    RagloopError,
    RateLimitedError,
    RemoteError,
)
from .kbstore import KbIndex, read_image_bytes
from .llm import (
    ChatMessage,
    FewshotDemo,
    LlmClient,
    build_fewshot_prompt,
    select_fewshot_demos,
)
from .prompts import (
    KIND_FEWSHOT_EM,
    KIND_FINAL_ANSWER,
    KIND_INITIAL_DESCRIPTION,
    KIND_QUERY_EXPANSION,
    KIND_QUERY_GENERATION,
    KIND_RECORD_GENERATION,
    parse_subqueries,
    render_prompt,
)
from .search import SLOT_INITIAL, ScoredHit, joint_search

logger = logging.getLogger(__name__)


@dataclass
class Sample:
    """One benchmark item."""

    sample_id: str
    image_ref: str
    question: str
    gold_answers: list[str]
    gold_entity_ids: list[str] = field(default_factory=list)
    annotator_answers: list[str] | None = None

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "image": self.image_ref,
            "question": self.question,
            "answers": self.gold_answers,
            "entity_ids": self.gold_entity_ids,
        }
        if self.annotator_answers is not None:
            d["annotator_answers"] = self.annotator_answers
        return d


@dataclass
class ReasoningRecord:
    iteration: int
    text: str
    sources: list[str]

    def to_dict(self) -> dict:
        return {"iteration": self.iteration, "text": self.text, "sources": self.sources}

    @classmethod
    def from_dict(cls, d: dict) -> "ReasoningRecord":
        return cls(d["iteration"], d["text"], list(d["sources"]))


@dataclass
class MultiQuery:
    expanded: str
    generated: list[str]

    def to_dict(self) -> dict:
        return {"expanded": self.expanded, "generated": self.generated}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiQuery":
        return cls(d["expanded"], list(d["generated"]))


@dataclass
class IterationTrace:
    iteration: int
    multi_query: MultiQuery
    text_hits: list[ScoredHit]
    mm_hits: list[ScoredHit]
    record: ReasoningRecord
    # Wall-clock per step; kept in memory only. Excluded from the dump so
    # repeated scripted runs serialize byte-identically.
    timings: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "multi_query": self.multi_query.to_dict(),
            "text_hits": [h.to_dict() for h in self.text_hits],
            "mm_hits": [h.to_dict() for h in self.mm_hits],
            "record": self.record.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IterationTrace":
        return cls(
            d["iteration"],
            MultiQuery.from_dict(d["multi_query"]),
            [ScoredHit.from_dict(h) for h in d["text_hits"]],
            [ScoredHit.from_dict(h) for h in d["mm_hits"]],
            ReasoningRecord.from_dict(d["record"]),
        )


@dataclass
class RunResult:
    sample_id: str
    description: str
    traces: list[IterationTrace]
    answer: str
    cumulative_doc_ids: list[list[str]]
    failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "description": self.description,
            "traces": [t.to_dict() for t in self.traces],
            "answer": self.answer,
            "cumulative_doc_ids": self.cumulative_doc_ids,
            "failed": self.failed,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(
            d["sample_id"],
            d["description"],
            [IterationTrace.from_dict(t) for t in d["traces"]],
            d["answer"],
            [list(ids) for ids in d["cumulative_doc_ids"]],
            bool(d.get("failed", False)),
            d.get("error"),
        )


@dataclass
class KbSet:
    text: KbIndex | None = None
    mm: KbIndex | None = None


# Transport-level chat failures that degrade gracefully at the description
# step; a scripted-key miss stays fatal so broken test scripts surface.
_DEGRADABLE_CHAT_ERRORS = (RemoteError, ChatTimeoutError, RateLimitedError,
                           MalformedResponseError)


def _join_records(records: list[ReasoningRecord]) -> str:
    return "\n".join(r.text for r in records)


class Pipeline:
    """Runs the full loop for samples against a fixed KB/provider/LLM set."""

    def __init__(self, kbs: KbSet, config: RunConfig, llm: LlmClient,
                 fewshot_pool: list[FewshotDemo] | None = None):
        self.kbs = kbs
        self.config = config
        self.providers = config.providers
        self.llm = llm
        self.budget = config.effective_budget()
        self.fewshot_pool = fewshot_pool or []

    # -- knowledge serialization ------------------------------------------

    def _serialize_knowledge(self, text_hits: list[ScoredHit],
                             mm_hits: list[ScoredHit],
                             description: str | None = None) -> str:
        """Prompt context block: passages first, then image-text pairs,
        each already score-descending."""
        lines: list[str] = []
        if description:
            lines.append(f"Description: {description}")
        if text_hits:
            lines.append("Text Passages:")
            for i, h in enumerate(text_hits, start=1):
                title = self.kbs.text.title_of(h.doc_id)
                body = self.kbs.text.text_of(h.doc_id)
                lines.append(f"{i}. {title}: {body}" if title else f"{i}. {body}")
        if mm_hits:
            lines.append("Image-Text Pairs:")
            for i, h in enumerate(mm_hits, start=1):
                lines.append(f"{i}. {self.kbs.mm.text_of(h.doc_id)}")
        return "\n".join(lines)

    # -- loop steps --------------------------------------------------------

    def initial_record(self, sample: Sample, image_bytes: bytes,
                       fixed_image_vec: np.ndarray | None) -> tuple[str, IterationTrace]:
        """Bootstrap: describe the image, expand the question with the
        description, search at full budget, and synthesize record 0."""
        timings: dict[str, float] = {}
        t0 = time.perf_counter()
        prompt = render_prompt(KIND_INITIAL_DESCRIPTION, question=sample.question)
        try:
            description = self.llm.chat(
                [ChatMessage.user({"text": prompt}, {"image": image_bytes})],
                kind=KIND_INITIAL_DESCRIPTION, sample_id=sample.sample_id, iteration=0,
            )
        except _DEGRADABLE_CHAT_ERRORS as exc:
            logger.warning("description failed for %s (%s); degrading to bare question",
                           sample.sample_id, exc)
            description = ""
        timings["describe"] = time.perf_counter() - t0

        if description.strip():
            expanded = render_prompt(KIND_QUERY_EXPANSION, question=sample.question,
                                     reasoning_record=description)
        else:
            expanded = sample.question
        multi_query = MultiQuery(expanded=expanded, generated=[])

        t0 = time.perf_counter()
        text_hits, mm_hits = joint_search(
            self.kbs.text, self.kbs.mm, multi_query, fixed_image_vec, self.budget,
            self.providers.text, self.providers.mm_text, expanded_slot=SLOT_INITIAL,
        )
        timings["search"] = time.perf_counter() - t0

        record = self._synthesize_record(sample, image_bytes, text_hits, mm_hits,
                                         iteration=0, description=description, timings=timings)
        trace = IterationTrace(0, multi_query, text_hits, mm_hits, record, timings)
        return description, trace

    def _synthesize_record(self, sample: Sample, image_bytes: bytes,
                           text_hits: list[ScoredHit], mm_hits: list[ScoredHit],
                           iteration: int, description: str | None,
                           timings: dict[str, float]) -> ReasoningRecord:
        knowledge = self._serialize_knowledge(text_hits, mm_hits, description)
        prompt = render_prompt(KIND_RECORD_GENERATION, question=sample.question,
                               knowledge=knowledge)
        t0 = time.perf_counter()
        text = self.llm.chat(
            [ChatMessage.user({"text": prompt}, {"image": image_bytes})],
            kind=KIND_RECORD_GENERATION, sample_id=sample.sample_id, iteration=iteration,
        )
        timings["record"] = time.perf_counter() - t0
        sources = [h.doc_id for h in text_hits] + [h.doc_id for h in mm_hits]
        return ReasoningRecord(iteration=iteration, text=text, sources=sources)

    def _generate_subqueries(self, sample: Sample, records: list[ReasoningRecord],
                             iteration: int) -> list[str]:
        """Two follow-up questions from the accumulated records; one retry
        on a malformed response, then the iteration proceeds
        expansion-only."""
        prompt = render_prompt(KIND_QUERY_GENERATION, question=sample.question,
                               reasoning_records=_join_records(records))
        messages = [ChatMessage.user_text(prompt)]
        for attempt in range(2):
            raw = self.llm.chat(messages, kind=KIND_QUERY_GENERATION,
                                sample_id=sample.sample_id, iteration=iteration)
            try:
                return parse_subqueries(raw).questions
            except ParseFailureError as exc:
                logger.warning("sub-query parse failed for %s iter %d (attempt %d): %s",
                               sample.sample_id, iteration, attempt + 1, exc)
        return []

    def iterate_once(self, sample: Sample, image_bytes: bytes,
                     fixed_image_vec: np.ndarray | None,
                     records: list[ReasoningRecord], iteration: int) -> IterationTrace:
        """One refinement cycle: multi-query transformation, joint search
        under the split budget, and record synthesis over the new hits."""
        timings: dict[str, float] = {}
        expanded = render_prompt(KIND_QUERY_EXPANSION, question=sample.question,
                                 reasoning_record=records[-1].text)
        t0 = time.perf_counter()
        generated = (self._generate_subqueries(sample, records, iteration)
                     if self.config.enable_generation else [])
        timings["generate"] = time.perf_counter() - t0
        multi_query = MultiQuery(expanded=expanded, generated=generated)

        t0 = time.perf_counter()
        text_hits, mm_hits = joint_search(
            self.kbs.text, self.kbs.mm, multi_query, fixed_image_vec, self.budget,
            self.providers.text, self.providers.mm_text,
        )
        timings["search"] = time.perf_counter() - t0

        record = self._synthesize_record(sample, image_bytes, text_hits, mm_hits,
                                         iteration=iteration, description=None,
                                         timings=timings)
        return IterationTrace(iteration, multi_query, text_hits, mm_hits, record, timings)

    def _final_answer(self, sample: Sample, image_bytes: bytes,
                      records: list[ReasoningRecord]) -> str:
        records_text = _join_records(records)
        if self.config.answer_mode == ANSWER_EXACT_ENTITY and self.fewshot_pool:
            demos = select_fewshot_demos(sample.question, self.fewshot_pool,
                                         self.providers.text,
                                         n=self.config.fewshot_demos)
            messages = build_fewshot_prompt(sample.question, image_bytes,
                                            records_text, demos)
            kind = KIND_FEWSHOT_EM if demos else KIND_FINAL_ANSWER
        else:
            prompt = render_prompt(KIND_FINAL_ANSWER, question=sample.question,
                                   reasoning_records=records_text)
            messages = [ChatMessage.user({"text": prompt}, {"image": image_bytes})]
            kind = KIND_FINAL_ANSWER
        return self.llm.chat(messages, kind=kind, sample_id=sample.sample_id,
                             iteration=self.config.iterations)

    # -- per-sample driver ---------------------------------------------------

    def run_sample(self, sample: Sample) -> RunResult:
        """Full loop for one sample; fatal errors yield a flagged result
        with whatever traces completed."""
        traces: list[IterationTrace] = []
        description = ""
        try:
            # image refs arrive already resolved by the benchmark loader
            image_bytes = read_image_bytes(sample.image_ref)
            fixed_image_vec = None
            if self.kbs.mm is not None and self.budget.mm_k > 0:
                fixed_image_vec = embed_image(self.providers.image, image_bytes)

            description, trace0 = self.initial_record(sample, image_bytes, fixed_image_vec)
            traces.append(trace0)
            records = [trace0.record]
            for i in range(1, self.config.iterations + 1):
                trace = self.iterate_once(sample, image_bytes, fixed_image_vec, records, i)
                traces.append(trace)
                records.append(trace.record)

            answer = self._final_answer(sample, image_bytes, records)
            return RunResult(sample.sample_id, description, traces, answer,
                             _cumulative_doc_ids(traces))
        except (RagloopError, OSError) as exc:
            logger.error("sample %s failed: %s", sample.sample_id, exc)
            return RunResult(sample.sample_id, description, traces, "",
                             _cumulative_doc_ids(traces), failed=True, error=str(exc))

    # -- benchmark driver ------------------------------------------------------

    def run_benchmark(self, samples: list[Sample], out_path: str | Path | None = None,
                      resume: bool = False) -> list[RunResult]:
        """Run all samples with bounded cross-sample parallelism.

        Results append to ``out_path`` as each sample completes (crash
        carries no completed work away); at the end the file is rewritten
        sorted by sample_id so repeated runs are byte-identical. With
        ``resume``, sample_ids already present are not recomputed.
        """
        lines: dict[str, str] = {}
        if out_path is not None:
            out_path = Path(out_path)
            if resume and out_path.exists():
                lines.update(_read_result_lines(out_path))

        todo = [s for s in samples if s.sample_id not in lines]
        lock = threading.Lock()
        handle = open(out_path, "a", encoding="utf-8") if out_path is not None else None

        def work(sample: Sample) -> None:
            try:
                result = self.run_sample(sample)
            except Exception as exc:  # isolation: one bad sample never stops the run
                logger.exception("unexpected failure on sample %s", sample.sample_id)
                result = RunResult(sample.sample_id, "", [], "", [],
                                   failed=True, error=f"unexpected: {exc}")
            line = json.dumps(result.to_dict(), sort_keys=True, ensure_ascii=False)
            with lock:
                lines[sample.sample_id] = line
                if handle is not None:
                    handle.write(line + "\n")
                    handle.flush()

        try:
            if self.config.parallelism > 1 and len(todo) > 1:
                with ThreadPoolExecutor(max_workers=self.config.parallelism) as pool:
                    list(pool.map(work, todo))
            else:
                for s in todo:
                    work(s)
        finally:
            if handle is not None:
                handle.close()

        ordered = sorted(lines.items())
        if out_path is not None:
            with open(out_path, "w", encoding="utf-8") as f:
                for _, line in ordered:
                    f.write(line + "\n")
        return [RunResult.from_dict(json.loads(line)) for _, line in ordered]


def _cumulative_doc_ids(traces: list[IterationTrace]) -> list[list[str]]:
    """Prefix unions of every doc_id retrieved up to each iteration."""
    seen: set[str] = set()
    out: list[list[str]] = []
    for t in traces:
        seen.update(h.doc_id for h in t.text_hits)
        seen.update(h.doc_id for h in t.mm_hits)
        out.append(sorted(seen))
    return out


def _read_result_lines(path: Path) -> dict[str, str]:
    """Completed result lines keyed by sample_id; partial lines are dropped
    so an interrupted run resumes cleanly."""
    lines: dict[str, str] = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                lines[obj["sample_id"]] = line
            except (json.JSONDecodeError, KeyError):
                logger.warning("skipping unparseable result line during resume")
    return lines


def load_results(path: str | Path) -> list[RunResult]:
    """Read a results JSONL dump back into RunResult objects."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(RunResult.from_dict(json.loads(line)))
    return out
