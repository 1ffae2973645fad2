"""Search engine: exactness, budgets, dedup, and the joint search."""

import numpy as np
import pytest

from conftest import make_raw_kb
from ragloop.embed import embed_image, embed_text
from ragloop.errors import DimensionMismatchError
from ragloop.kbstore import (
    MultimodalEntry,
    TextPassage,
    build_multimodal_kb,
    build_text_kb,
)
from ragloop.pipeline import MultiQuery
from ragloop.search import (
    RetrievalBudget,
    ScoredHit,
    SLOT_EXPANDED,
    SLOT_GENERATED_1,
    SLOT_GENERATED_2,
    allocate_budget,
    dedup_merge,
    joint_search,
    mips_topk,
    mm_score,
    search_multimodal,
    search_textual,
)


def brute_force_topk(kb, query, k):
    """All-pairs oracle: per-row python dot products, full sort."""
    q = np.asarray(query, dtype=np.float64)
    scores = [float(np.dot(kb.matrix[i].astype(np.float64), q)) for i in range(len(kb))]
    ids = [m["doc_id"] for m in kb.metadata]
    order = sorted(range(len(kb)), key=lambda i: (-scores[i], ids[i]))
    return [(ids[i], scores[i]) for i in order[:k]]


class TestMipsTopk:
    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        mat = rng.standard_normal((8, 16))
        mat /= np.linalg.norm(mat, axis=1, keepdims=True)
        kb = make_raw_kb(mat)
        hits = mips_topk(kb, mat[3].astype(np.float64), 3)
        assert hits[0].doc_id == "d003"
        assert abs(hits[0].score - 1.0) < 1e-6

    def test_truncates_to_corpus_size(self):
        rng = np.random.default_rng(1)
        kb = make_raw_kb(rng.standard_normal((4, 8)))
        assert len(mips_topk(kb, rng.standard_normal(8), 10)) == 4

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            n = int(rng.integers(5, 200))
            mat = rng.standard_normal((n, 32)).astype(np.float32)
            kb = make_raw_kb(mat)
            for _ in range(5):
                q = rng.standard_normal(32)
                k = int(rng.integers(1, 25))
                got = mips_topk(kb, q, k)
                want = brute_force_topk(kb, q, k)
                assert [h.doc_id for h in got] == [d for d, _ in want]
                for h, (_, s) in zip(got, want):
                    assert abs(h.score - s) < 1e-9

    def test_ties_break_by_doc_id(self):
        row = np.array([1.0, 0.0, 0.0], dtype=np.float32)
        kb = make_raw_kb(np.stack([row] * 5))
        hits = mips_topk(kb, row.astype(np.float64), 5)
        assert [h.doc_id for h in hits] == ["d000", "d001", "d002", "d003", "d004"]

    def test_dimension_mismatch(self):
        kb = make_raw_kb(np.eye(3))
        with pytest.raises(DimensionMismatchError):
            mips_topk(kb, np.zeros(5), 2)

    def test_source_matches_kb_kind(self):
        kb = make_raw_kb(np.eye(4))
        for h in mips_topk(kb, np.ones(4), 2):
            assert h.source == "textual"


class TestMmScore:
    def test_identity(self):
        assert mm_score(1.0, 1.0) == 1.0

    def test_arithmetic_mean(self):
        assert abs(mm_score(0.4, 0.8) - 0.6) < 1e-12

    def test_equals_half_concat_dot(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            u = rng.standard_normal(16); u /= np.linalg.norm(u)
            v = rng.standard_normal(16); v /= np.linalg.norm(v)
            a = rng.standard_normal(16); a /= np.linalg.norm(a)
            b = rng.standard_normal(16); b /= np.linalg.norm(b)
            concat_dot = float(np.dot(np.concatenate([u, v]), np.concatenate([a, b])))
            avg = mm_score(float(np.dot(v, b)), float(np.dot(u, a)))
            assert abs(concat_dot - 2.0 * avg) < 1e-9


@pytest.fixture
def mm_world(tmp_path, mm_text_provider, image_provider):
    """A small multimodal KB with one planted perfect match."""
    img_dir = tmp_path / "imgs"
    img_dir.mkdir()
    entries = []
    for i in range(12):
        p = img_dir / f"e{i}.img"
        p.write_bytes(f"mm-image-{i}".encode())
        entries.append(MultimodalEntry(doc_id=f"e{i:03d}", image_ref=str(p),
                                       section_text=f"mm section {i}"))
    kb = build_multimodal_kb(entries, mm_text_provider, image_provider)
    fixed = embed_image(image_provider, (img_dir / "e7.img").read_bytes())
    return kb, fixed


class TestSearchMultimodal:
    def test_perfect_match_scores_one(self, mm_world, mm_text_provider):
        kb, fixed = mm_world
        hits = search_multimodal(kb, fixed, "mm section 7", 3, mm_text_provider)
        assert hits[0].doc_id == "e007"
        assert abs(hits[0].score - 1.0) < 1e-6

    def test_fixed_image_component_repeatable(self, mm_world, mm_text_provider):
        kb, fixed = mm_world
        first = search_multimodal(kb, fixed, "some query", 5, mm_text_provider)
        second = search_multimodal(kb, fixed, "some query", 5, mm_text_provider)
        assert [(h.doc_id, h.score) for h in first] == [(h.doc_id, h.score) for h in second]

    def test_ranking_matches_separate_similarity_oracle(self, mm_world, mm_text_provider):
        kb, fixed = mm_world
        query = "which entity is shown"
        hits = search_multimodal(kb, fixed, query, len(kb), mm_text_provider)
        tvec = embed_text(mm_text_provider, query)
        oracle = []
        for m in kb.metadata:
            row = kb.matrix[kb.row_of(m["doc_id"])].astype(np.float64)
            img_sim = float(np.dot(row[:64], fixed))
            txt_sim = float(np.dot(row[64:], tvec))
            oracle.append((m["doc_id"], mm_score(txt_sim, img_sim)))
        oracle.sort(key=lambda x: (-x[1], x[0]))
        assert [h.doc_id for h in hits] == [d for d, _ in oracle]
        for h, (_, s) in zip(hits, oracle):
            assert abs(h.score - s) < 1e-9

    def test_requires_multimodal_kb(self, mm_text_provider):
        kb = make_raw_kb(np.eye(4))
        with pytest.raises(ValueError):
            search_multimodal(kb, np.zeros(2), "q", 1, mm_text_provider)


class TestAllocateBudget:
    def test_paper_default_two_generated(self):
        alloc = allocate_budget(RetrievalBudget(20, 10), 2)
        assert alloc.slots[SLOT_EXPANDED] == (10, 5)
        assert alloc.slots[SLOT_GENERATED_1] == (5, 3)
        assert alloc.slots[SLOT_GENERATED_2] == (5, 2)

    def test_zero_generated_full_budget(self):
        alloc = allocate_budget(RetrievalBudget(20, 10), 0)
        assert alloc.slots[SLOT_EXPANDED] == (20, 10)
        assert alloc.slots[SLOT_GENERATED_1] == (0, 0)

    def test_one_generated_gets_remainder(self):
        alloc = allocate_budget(RetrievalBudget(20, 10), 1)
        assert alloc.slots[SLOT_EXPANDED] == (10, 5)
        assert alloc.slots[SLOT_GENERATED_1] == (10, 5)

    def test_conservation_fuzz(self):
        rng = np.random.default_rng(6)
        for _ in range(500):
            budget = RetrievalBudget(int(rng.integers(0, 50)), int(rng.integers(0, 50)))
            n = int(rng.integers(0, 3))
            alloc = allocate_budget(budget, n)
            text_sum = sum(v[0] for v in alloc.slots.values())
            mm_sum = sum(v[1] for v in alloc.slots.values())
            assert text_sum <= budget.text_k
            assert mm_sum <= budget.mm_k
            assert all(v[0] >= 0 and v[1] >= 0 for v in alloc.slots.values())


def make_hit(doc_id, score, slot=SLOT_EXPANDED):
    return ScoredHit(doc_id, score, "textual", slot)


class TestDedupMerge:
    def test_keeps_max_score(self):
        out = dedup_merge([[make_hit("a", 0.9)], [make_hit("a", 0.7, SLOT_GENERATED_1)]], 10)
        assert len(out) == 1
        assert out[0].score == 0.9
        assert out[0].query_slot == SLOT_EXPANDED

    def test_empty(self):
        assert dedup_merge([], 5) == []
        assert dedup_merge([[], []], 5) == []

    def test_tie_earliest_slot_wins(self):
        out = dedup_merge([[make_hit("a", 0.5)], [make_hit("a", 0.5, SLOT_GENERATED_1)]], 10)
        assert out[0].query_slot == SLOT_EXPANDED

    def test_matches_union_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            lists = []
            for slot in (SLOT_EXPANDED, SLOT_GENERATED_1, SLOT_GENERATED_2):
                lists.append([
                    make_hit(f"doc{int(rng.integers(0, 12)):02d}",
                             round(float(rng.random()), 3), slot)
                    for _ in range(int(rng.integers(0, 8)))
                ])
            cap = int(rng.integers(1, 15))
            got = dedup_merge(lists, cap)
            # oracle: best score per id via plain max over a flat scan
            expect_scores = {}
            for lst in lists:
                for h in lst:
                    expect_scores[h.doc_id] = max(expect_scores.get(h.doc_id, -2.0), h.score)
            expect = sorted(expect_scores.items(), key=lambda kv: (-kv[1], kv[0]))[:cap]
            assert [(h.doc_id, h.score) for h in got] == expect

    def test_idempotent(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            hits = [make_hit(f"d{int(rng.integers(0, 10))}", round(float(rng.random()), 3))
                    for _ in range(12)]
            once = dedup_merge([hits], 8)
            twice = dedup_merge([once], 8)
            assert [(h.doc_id, h.score) for h in once] == [(h.doc_id, h.score) for h in twice]


@pytest.fixture
def joint_world(tmp_path, text_provider, mm_text_provider, image_provider):
    """Corpora engineered so each slot's quota hits its own planted docs.

    Expanded query "query E" has 10 exact text matches, generated queries
    have 5 each; the multimodal side mirrors this with 5/3/2 planted
    pairs whose image halves match the sample image.
    """
    passages = []
    for i in range(10):
        passages.append(TextPassage(f"exp{i:02d}", "", "query E"))
    for i in range(5):
        passages.append(TextPassage(f"g1_{i:02d}", "", "query G1"))
    for i in range(5):
        passages.append(TextPassage(f"g2_{i:02d}", "", "query G2"))
    for i in range(40):
        passages.append(TextPassage(f"noise{i:02d}", "", f"unrelated passage {i}"))
    text_kb = build_text_kb(passages, text_provider)

    img_dir = tmp_path / "jimgs"
    img_dir.mkdir()
    sample_img = img_dir / "sample.img"
    sample_img.write_bytes(b"the sample image")
    entries = []

    def add_entry(doc_id, text, image_bytes):
        p = img_dir / f"{doc_id}.img"
        p.write_bytes(image_bytes)
        entries.append(MultimodalEntry(doc_id=doc_id, image_ref=str(p), section_text=text))

    for i in range(5):
        add_entry(f"mexp{i:02d}", "query E", b"the sample image")
    for i in range(3):
        add_entry(f"mg1_{i:02d}", "query G1", b"the sample image")
    for i in range(2):
        add_entry(f"mg2_{i:02d}", "query G2", b"the sample image")
    for i in range(30):
        add_entry(f"mnoise{i:02d}", f"unrelated pair {i}", f"noise image {i}".encode())
    mm_kb = build_multimodal_kb(entries, mm_text_provider, image_provider)
    fixed = embed_image(image_provider, b"the sample image")
    return text_kb, mm_kb, fixed


class TestJointSearch:
    def test_disjoint_slots_fill_budget_exactly(self, joint_world, text_provider,
                                                mm_text_provider):
        text_kb, mm_kb, fixed = joint_world
        mq = MultiQuery(expanded="query E", generated=["query G1", "query G2"])
        text_hits, mm_hits = joint_search(text_kb, mm_kb, mq, fixed,
                                          RetrievalBudget(20, 10),
                                          text_provider, mm_text_provider)
        assert len(text_hits) == 20
        assert len(mm_hits) == 10
        text_ids = {h.doc_id for h in text_hits}
        assert {f"exp{i:02d}" for i in range(10)} <= text_ids
        assert {f"g1_{i:02d}" for i in range(5)} <= text_ids
        assert {f"g2_{i:02d}" for i in range(5)} <= text_ids
        mm_ids = {h.doc_id for h in mm_hits}
        assert {f"mexp{i:02d}" for i in range(5)} <= mm_ids
        assert {f"mg1_{i:02d}" for i in range(3)} <= mm_ids
        assert {f"mg2_{i:02d}" for i in range(2)} <= mm_ids

    def test_duplicate_subquery_backfills_from_expansion(self, text_provider):
        # 6-doc KB; generated query identical to expansion, so its whole
        # contribution collides and the freed quota backfills with the
        # expansion's next-ranked docs.
        passages = [TextPassage("s00", "", "shared topic")] + [
            TextPassage(f"n{i:02d}", "", f"other topic {i}") for i in range(5)
        ]
        kb = build_text_kb(passages, text_provider)
        mq = MultiQuery(expanded="shared topic", generated=["shared topic"])
        hits, _ = joint_search(kb, None, mq, None, RetrievalBudget(4, 0),
                               text_provider, None)
        assert len(hits) == 4
        expanded_order = search_textual(kb, "shared topic", 4, text_provider)
        assert {h.doc_id for h in hits} == {h.doc_id for h in expanded_order}
        assert len({h.doc_id for h in hits}) == 4

    def test_failed_subquery_slot_backfills(self, text_provider):
        passages = [TextPassage(f"p{i:02d}", "", f"topic {i}") for i in range(8)]
        kb = build_text_kb(passages, text_provider)
        # whitespace-only sub-query fails to embed; its quota must come
        # back from the expansion ranking
        mq = MultiQuery(expanded="topic 3", generated=["   ", "topic 5"])
        hits, _ = joint_search(kb, None, mq, None, RetrievalBudget(6, 0),
                               text_provider, None)
        assert len(hits) == 6

    def test_no_generation_equals_full_budget_single_query(self, joint_world,
                                                           text_provider, mm_text_provider):
        text_kb, mm_kb, fixed = joint_world
        mq = MultiQuery(expanded="query E", generated=[])
        text_hits, mm_hits = joint_search(text_kb, mm_kb, mq, fixed,
                                          RetrievalBudget(20, 10),
                                          text_provider, mm_text_provider)
        direct_text = search_textual(text_kb, "query E", 20, text_provider)
        direct_mm = search_multimodal(mm_kb, fixed, "query E", 10, mm_text_provider)
        assert [(h.doc_id, h.score) for h in text_hits] \
            == [(h.doc_id, h.score) for h in direct_text]
        assert [(h.doc_id, h.score) for h in mm_hits] \
            == [(h.doc_id, h.score) for h in direct_mm]

    def test_small_kb_returns_everything(self, text_provider):
        passages = [TextPassage(f"p{i}", "", f"text {i}") for i in range(7)]
        kb = build_text_kb(passages, text_provider)
        mq = MultiQuery(expanded="anything", generated=["q1", "q2"])
        hits, _ = joint_search(kb, None, mq, None, RetrievalBudget(20, 0),
                               text_provider, None)
        assert len(hits) == 7

    def test_budget_fuzz_never_exceeds(self, text_provider):
        rng = np.random.default_rng(11)
        passages = [TextPassage(f"p{i:03d}", "", f"subject {i}") for i in range(40)]
        kb = build_text_kb(passages, text_provider)
        queries = [f"subject {i}" for i in range(40)] + ["subject 1", "anything else"]
        for _ in range(60):
            n = int(rng.integers(0, 3))
            gen = [str(rng.choice(queries)) for _ in range(n)]
            mq = MultiQuery(expanded=str(rng.choice(queries)), generated=gen)
            budget = RetrievalBudget(int(rng.integers(1, 25)), 0)
            hits, _ = joint_search(kb, None, mq, None, budget, text_provider, None)
            assert len(hits) == min(budget.text_k, 40)
            assert len({h.doc_id for h in hits}) == len(hits)
