"""Prompt templates and the structured sub-query parser.

Templates are stored verbatim and instantiated byte-exactly; snapshot
tests pin each rendering against a committed golden file. Query
expansion is a pure string template, never a chat call.

The few-shot template embeds ``[Image n Content]`` / ``[Main Image
Content]`` markers; the chat layer splits on those markers to interleave
actual image parts.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import MissingSlotError, ParseFailureError

KIND_INITIAL_DESCRIPTION = "initial-description"
KIND_QUERY_EXPANSION = "query-expansion"
KIND_QUERY_GENERATION = "query-generation"
KIND_RECORD_GENERATION = "record-generation"
KIND_FINAL_ANSWER = "final-answer"
KIND_FEWSHOT_EM = "fewshot-em"

IMAGE_MARKER = "[Image {n} Content]"
MAIN_IMAGE_MARKER = "[Main Image Content]"

_QUERY_GENERATION_TEMPLATE = """Question: {question}
Knowledge: {reasoning_records}

Please first analyze all the information in a section named Analysis (## Analysis).
Generate two follow-up questions to search for additional information and helpful to confirm knowledge, in a section named Queries (## Queries).
Your output should be in the following format:

## Analysis
Analysis question and knowledge to ask context-specific queries that helps to address question.
## Queries
Question 1: question 1.
Question 2: question 2.
"""

_RECORD_GENERATION_TEMPLATE = """Question: {question}
Knowledge: {knowledge}

Based on image, description and knowledge, summarize correct and relevant information with image and question.
"""

_FINAL_ANSWER_TEMPLATE = """Please answer the following question using the provided information and image.

Question: {question}
Relevant Knowledge: {reasoning_records}

Based on the information, provide a detailed answer to the question.
"""

_FEWSHOT_HEADER = """Answer the knowledge-intensive question based on the provided image and context.
Generate a concise and accurate answer grounded in the retrieved information.
Use the context to support reasoning, and directly output the final answer.
"""

_COUNT_WORDS = {1: "One", 2: "Two", 3: "Three", 4: "Four", 5: "Five",
                6: "Six", 7: "Seven", 8: "Eight", 9: "Nine", 10: "Ten"}


def fewshot_template(n_demos: int) -> str:
    """Few-shot answer-extraction template with ``n_demos`` example blocks."""
    if n_demos < 1:
        raise ValueError("fewshot template needs at least one demonstration")
    word = _COUNT_WORDS.get(n_demos, str(n_demos))
    plural = "example is" if n_demos == 1 else "examples are"
    parts = [_FEWSHOT_HEADER, f"\n{word} {plural} shown below:\n"]
    for i in range(1, n_demos + 1):
        parts.append(
            f"\n##Example {i}:\n"
            + IMAGE_MARKER.format(n=i) + "\n"
            + f"##Context: {{few_shot_context_{i}}}\n"
            + f"##Question: {{few_shot_question_{i}}}\n"
            + f"##Best Answer: {{few_shot_answer_{i}}}\n"
        )
    parts.append(
        "\nNow, answer this question\n"
        + MAIN_IMAGE_MARKER + "\n"
        + "##Context: {reasoning_records}\n"
        + "##Question: {question}\n"
        + "##Best Answer:"
    )
    return "".join(parts)


TEMPLATES: dict[str, str] = {
    KIND_INITIAL_DESCRIPTION:
        "Question: {question}\n Concisely describe image which is relevant to question.\n",
    KIND_QUERY_EXPANSION:
        "Question: {question}\n{reasoning_record}\n",
    KIND_QUERY_GENERATION: _QUERY_GENERATION_TEMPLATE,
    KIND_RECORD_GENERATION: _RECORD_GENERATION_TEMPLATE,
    KIND_FINAL_ANSWER: _FINAL_ANSWER_TEMPLATE,
    KIND_FEWSHOT_EM: fewshot_template(3),
}

ALL_KINDS = tuple(TEMPLATES)


def render_prompt(kind: str, **slots: str) -> str:
    """Instantiate a template byte-exactly. Raises MissingSlotError when a
    required slot is absent."""
    try:
        template = TEMPLATES[kind]
    except KeyError:
        raise ValueError(f"unknown prompt kind {kind!r}") from None
    try:
        return template.format(**slots)
    except KeyError as exc:
        raise MissingSlotError(exc.args[0]) from None


@dataclass
class SubQuerySet:
    """Parsed query-generation output: free-text analysis plus exactly two
    follow-up questions."""

    analysis: str
    questions: list[str]


_HEADER_RE = re.compile(r"^\s*#{1,6}\s*(analysis|queries)\b.*$", re.IGNORECASE | re.MULTILINE)
_QUESTION_RE = re.compile(
    r"^[\s>*\-•\d.)\]]*question\s*\d+\s*[:.]\s*(\S.*)$", re.IGNORECASE
)


def _section(raw: str, name: str) -> str | None:
    """Text between the named markdown header and the next header (or EOF)."""
    for m in _HEADER_RE.finditer(raw):
        if m.group(1).lower() == name:
            nxt = _HEADER_RE.search(raw, m.end())
            return raw[m.end(): nxt.start() if nxt else len(raw)]
    return None


def _question_lines(text: str) -> list[str]:
    out = []
    for line in text.splitlines():
        m = _QUESTION_RE.match(line)
        if m:
            q = m.group(1).strip()
            if q:
                out.append(q)
    return out


def parse_subqueries(raw: str) -> SubQuerySet:
    """Extract the analysis and the first two generated questions.

    Looks for ``Question <n>:`` lines under the ``## Queries`` header,
    tolerating bullets, casing, and stray whitespace; when the header is
    missing, falls back to scanning the whole response.
    """
    if not raw or not raw.strip():
        raise ParseFailureError("empty response")
    analysis = (_section(raw, "analysis") or "").strip()
    queries_section = _section(raw, "queries")
    questions = _question_lines(queries_section) if queries_section is not None else []
    if len(questions) < 2:
        questions = _question_lines(raw)
    if len(questions) < 2:
        raise ParseFailureError(
            f"found {len(questions)} question line(s), need 2"
        )
    return SubQuerySet(analysis=analysis, questions=questions[:2])
