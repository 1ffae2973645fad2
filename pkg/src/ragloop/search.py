"""Exact top-k inner-product search and the per-iteration joint search.

The search path is deliberately exact: every query scans all rows, so
results are reproducible and oracle-checkable. Ties are broken by
ascending doc_id to keep transcripts deterministic.

Multimodal scores are reported as the average of the image and text
similarities, i.e. the raw concatenated inner product divided by two.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .embed import ProviderConfig, embed_text
from .errors import DimensionMismatchError, RagloopError
from .kbstore import KIND_MULTIMODAL, KbIndex

logger = logging.getLogger(__name__)

SLOT_EXPANDED = "expanded"
SLOT_GENERATED_1 = "generated-1"
SLOT_GENERATED_2 = "generated-2"
SLOT_INITIAL = "initial"

GENERATED_SLOTS = (SLOT_GENERATED_1, SLOT_GENERATED_2)


@dataclass
class ScoredHit:
    doc_id: str
    score: float
    source: str  # KB kind: "textual" | "multimodal"
    query_slot: str

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "score": self.score,
            "source": self.source,
            "query_slot": self.query_slot,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScoredHit":
        return cls(d["doc_id"], float(d["score"]), d["source"], d["query_slot"])


@dataclass(frozen=True)
class RetrievalBudget:
    """Per-iteration retrieval caps: 20 passages and 10 image-text pairs
    by default, text twice the pairs."""

    text_k: int = 20
    mm_k: int = 10

    def __post_init__(self):
        if self.text_k < 0 or self.mm_k < 0:
            raise ValueError("budget values must be nonnegative")


@dataclass
class BudgetAllocation:
    """Per-slot (text_k, mm_k) quotas. Slot sums never exceed the budget."""

    slots: dict[str, tuple[int, int]] = field(default_factory=dict)

    def text_quota(self, slot: str) -> int:
        return self.slots.get(slot, (0, 0))[0]

    def mm_quota(self, slot: str) -> int:
        return self.slots.get(slot, (0, 0))[1]


def _split_half(total: int, n_generated: int) -> list[int]:
    """Expanded slot takes ceil(total/2); the rest is split evenly across
    generated slots with any remainder going to generated-1."""
    expanded = (total + 1) // 2 if n_generated else total
    rest = total - expanded
    if n_generated == 0:
        return [expanded]
    per = rest // n_generated
    rem = rest - per * n_generated
    return [expanded] + [per + (1 if i < rem else 0) for i in range(n_generated)]


def allocate_budget(budget: RetrievalBudget, n_generated: int) -> BudgetAllocation:
    """Divide the fixed per-iteration budget across the multi-query slots."""
    if n_generated not in (0, 1, 2):
        raise ValueError("n_generated must be 0, 1, or 2")
    text_parts = _split_half(budget.text_k, n_generated)
    mm_parts = _split_half(budget.mm_k, n_generated)
    slots = {SLOT_EXPANDED: (text_parts[0], mm_parts[0])}
    for i in range(2):
        if i < n_generated:
            slots[GENERATED_SLOTS[i]] = (text_parts[1 + i], mm_parts[1 + i])
        else:
            slots[GENERATED_SLOTS[i]] = (0, 0)
    return BudgetAllocation(slots)


def mips_topk(kb: KbIndex, query_vec: np.ndarray, k: int,
              slot: str = SLOT_EXPANDED) -> list[ScoredHit]:
    """Exact maximum-inner-product top-k over all rows.

    Sorted by inner product descending, doc_id ascending on ties.
    """
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (kb.dim,):
        raise DimensionMismatchError(
            f"query dim {query_vec.shape} does not match KB dim {kb.dim}"
        )
    if k <= 0 or len(kb) == 0:
        return []
    scores = kb.matrix @ query_vec
    order = np.lexsort((kb.doc_ids, -scores))[:k]
    return [
        ScoredHit(kb.metadata[i]["doc_id"], float(scores[i]), kb.kind, slot)
        for i in order
    ]


def mm_score(text_sim: float, image_sim: float) -> float:
    """Average of the text-to-text and image-to-image similarities."""
    return (text_sim + image_sim) / 2.0


def search_textual(kb: KbIndex, query_text: str, k: int,
                   provider: ProviderConfig, slot: str = SLOT_EXPANDED) -> list[ScoredHit]:
    """Embed a query and retrieve top-k passages by cosine similarity."""
    return mips_topk(kb, embed_text(provider, query_text), k, slot=slot)


def search_multimodal(kb: KbIndex, fixed_image_vec: np.ndarray, query_text: str,
                      k: int, text_provider: ProviderConfig,
                      slot: str = SLOT_EXPANDED) -> list[ScoredHit]:
    """Retrieve top-k image-text pairs for a concatenated query.

    The image half is the sample's fixed input-image embedding, computed
    once and reused every iteration, so visual relevance stays constant
    while the text half follows the transformed query. Reported scores
    are average similarities (raw inner product / 2).
    """
    if kb.kind != KIND_MULTIMODAL:
        raise ValueError("search_multimodal requires a multimodal KB")
    text_vec = embed_text(text_provider, query_text)
    query = np.concatenate([np.asarray(fixed_image_vec, dtype=np.float64), text_vec])
    hits = mips_topk(kb, query, k, slot=slot)
    for h in hits:
        h.score /= 2.0
    return hits


def dedup_merge(hit_lists: Sequence[Sequence[ScoredHit]], cap: int) -> list[ScoredHit]:
    """Union hit lists, unique by doc_id keeping the max score.

    On equal scores the earliest list wins (lists are passed in slot
    precedence order: expanded, generated-1, generated-2). Output is
    sorted score-descending with doc_id-ascending tie order, truncated
    to ``cap``.
    """
    best: dict[str, ScoredHit] = {}
    for hits in hit_lists:
        for h in hits:
            cur = best.get(h.doc_id)
            if cur is None or h.score > cur.score:
                best[h.doc_id] = h
    merged = sorted(best.values(), key=lambda h: (-h.score, h.doc_id))
    return merged[: max(cap, 0)]


def _search_kb_slots(kb: KbIndex, queries: list[tuple[str, str]], quotas: dict[str, int],
                     cap: int, run_slot) -> list[ScoredHit]:
    """Run one KB's per-slot searches, union them, and backfill to the cap.

    ``queries`` is [(slot, query_text), ...] with the expanded slot first.
    The expanded slot is searched at the full cap so its tail can backfill
    quota freed by duplicate collisions or failed generated slots.
    """
    if cap <= 0:
        return []
    expanded_slot, expanded_text = queries[0]
    expanded_full = run_slot(kb, expanded_text, cap, expanded_slot)

    contributions = [expanded_full[: quotas[expanded_slot]]]
    for slot, text in queries[1:]:
        quota = quotas[slot]
        if quota <= 0:
            continue
        try:
            contributions.append(run_slot(kb, text, quota, slot))
        except RagloopError as exc:
            logger.warning("sub-query slot %s failed (%s); backfilling from expansion",
                           slot, exc)

    merged = dedup_merge(contributions, cap)
    if len(merged) < cap:
        present = {h.doc_id for h in merged}
        for h in expanded_full:
            if len(merged) >= cap:
                break
            if h.doc_id not in present:
                merged.append(h)
                present.add(h.doc_id)
        merged.sort(key=lambda h: (-h.score, h.doc_id))
    return merged


def joint_search(text_kb: KbIndex | None, mm_kb: KbIndex | None, multi_query,
                 fixed_image_vec: np.ndarray | None, budget: RetrievalBudget,
                 text_provider: ProviderConfig | None,
                 mm_text_provider: ProviderConfig | None,
                 expanded_slot: str = SLOT_EXPANDED) -> tuple[list[ScoredHit], list[ScoredHit]]:
    """Retrieve from both KBs under the allocated budget and union per KB.

    Each query slot pulls its quota from each KB; per-KB results are
    deduplicated and any freed quota is backfilled from the expanded
    slot's next-ranked hits so the per-iteration evidence volume stays
    constant. A KB is skipped when absent or its budget side is zero.
    """
    generated = list(multi_query.generated)
    alloc = allocate_budget(budget, len(generated))
    queries = [(expanded_slot, multi_query.expanded)]
    for i, q in enumerate(generated):
        queries.append((GENERATED_SLOTS[i], q))

    quotas_text = {expanded_slot: alloc.text_quota(SLOT_EXPANDED)}
    quotas_mm = {expanded_slot: alloc.mm_quota(SLOT_EXPANDED)}
    for slot in GENERATED_SLOTS:
        quotas_text[slot] = alloc.text_quota(slot)
        quotas_mm[slot] = alloc.mm_quota(slot)

    text_hits: list[ScoredHit] = []
    if text_kb is not None and budget.text_k > 0:
        text_hits = _search_kb_slots(
            text_kb, queries, quotas_text, budget.text_k,
            lambda kb, q, k, slot: search_textual(kb, q, k, text_provider, slot=slot),
        )

    mm_hits: list[ScoredHit] = []
    if mm_kb is not None and budget.mm_k > 0:
        mm_hits = _search_kb_slots(
            mm_kb, queries, quotas_mm, budget.mm_k,
            lambda kb, q, k, slot: search_multimodal(
                kb, fixed_image_vec, q, k, mm_text_provider, slot=slot),
        )

    return text_hits, mm_hits
