"""Provider-pluggable iterative multimodal RAG engine.

Public surface: embedding providers, KB construction and persistence,
exact inner-product search with per-iteration budgeting, the chat client
and prompt templates, the iterative pipeline, evaluation metrics, and
benchmark ingestion. The ``ragloop`` CLI ties them together.
"""

from .embed import ProviderConfig, embed_image, embed_text, l2_normalize
from .kbstore import (
    KbIndex,
    MultimodalEntry,
    TextPassage,
    build_multimodal_kb,
    build_text_kb,
    load_kb,
    save_kb,
)
from .llm import ChatMessage, FewshotDemo, LlmClient, LlmConfig, build_fewshot_prompt
from .pipeline import (
    IterationTrace,
    KbSet,
    MultiQuery,
    Pipeline,
    ReasoningRecord,
    RunResult,
    Sample,
    load_results,
)
from .prompts import SubQuerySet, parse_subqueries, render_prompt
from .search import (
    BudgetAllocation,
    RetrievalBudget,
    ScoredHit,
    allocate_budget,
    dedup_merge,
    joint_search,
    mips_topk,
    mm_score,
    search_multimodal,
    search_textual,
)

__version__ = "0.1.0"

__all__ = [
    "ProviderConfig", "embed_image", "embed_text", "l2_normalize",
    "KbIndex", "MultimodalEntry", "TextPassage",
    "build_multimodal_kb", "build_text_kb", "load_kb", "save_kb",
    "ChatMessage", "FewshotDemo", "LlmClient", "LlmConfig", "build_fewshot_prompt",
    "IterationTrace", "KbSet", "MultiQuery", "Pipeline", "ReasoningRecord",
    "RunResult", "Sample", "load_results",
    "SubQuerySet", "parse_subqueries", "render_prompt",
    "BudgetAllocation", "RetrievalBudget", "ScoredHit",
    "allocate_budget", "dedup_merge", "joint_search", "mips_topk", "mm_score",
    "search_multimodal", "search_textual",
    "__version__",
]
