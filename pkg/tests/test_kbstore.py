"""KB construction and bundle persistence."""

import json
import math

import numpy as np
import pytest

from conftest import make_mm_entries, make_passages
from ragloop.embed import ProviderConfig, embed_image, embed_text
from ragloop.errors import (
    CorruptBundleError,
    EmbeddingError,
    EmptyCorpusError,
    FingerprintMismatchError,
    ImageReadError,
    UnknownDocIdError,
)
from ragloop.kbstore import (
    EMBEDDINGS_FILE,
    MultimodalEntry,
    TextPassage,
    build_multimodal_kb,
    build_text_kb,
    load_kb,
    save_kb,
)


def row_norm(row) -> float:
    return math.sqrt(sum(float(x) * float(x) for x in row))


class TestBuildTextKb:
    def test_shape_and_row_norms(self, text_provider):
        kb = build_text_kb(make_passages(100), text_provider)
        assert kb.matrix.shape == (100, 64)
        for i in range(100):
            assert abs(row_norm(kb.matrix[i]) - 1.0) < 1e-6

    def test_summary_preferred_over_text(self, text_provider):
        passage = TextPassage(doc_id="p1", title="T", text="full body text",
                              summary="short summary")
        kb = build_text_kb([passage], text_provider)
        expect = embed_text(text_provider, "short summary").astype(np.float32)
        assert np.array_equal(kb.matrix[0], expect)

    def test_empty_stream(self, text_provider):
        with pytest.raises(EmptyCorpusError):
            build_text_kb([], text_provider)

    def test_embedding_error_names_doc(self, text_provider):
        bad = TextPassage(doc_id="bad-doc", title="", text="   ")
        with pytest.raises(EmbeddingError) as err:
            build_text_kb([bad], text_provider)
        assert err.value.doc_id == "bad-doc"

    def test_parallel_build_preserves_order(self, text_provider):
        passages = make_passages(40)
        serial = build_text_kb(passages, text_provider, workers=1)
        parallel = build_text_kb(passages, text_provider, workers=4)
        assert np.array_equal(serial.matrix, parallel.matrix)
        assert serial.metadata == parallel.metadata

    def test_doc_lookup(self, text_provider):
        kb = build_text_kb(make_passages(10), text_provider)
        assert kb.row_of("t0003") == 3
        assert kb.metadata[kb.row_of("t0007")]["doc_id"] == "t0007"
        with pytest.raises(UnknownDocIdError):
            kb.row_of("missing")

    def test_matrix_immutable(self, text_provider):
        kb = build_text_kb(make_passages(3), text_provider)
        with pytest.raises(ValueError):
            kb.matrix[0, 0] = 5.0


class TestBuildMultimodalKb:
    def test_row_is_concat_of_unit_halves(self, tmp_path, mm_text_provider, image_provider):
        entries = make_mm_entries(tmp_path, 1)
        kb = build_multimodal_kb(entries, mm_text_provider, image_provider)
        assert kb.dim == 128
        u = embed_image(image_provider, (tmp_path / "images" / "m0000.img").read_bytes())
        v = embed_text(mm_text_provider, entries[0].section_text)
        expect = np.concatenate([u, v]).astype(np.float32)
        assert np.array_equal(kb.matrix[0], expect)
        assert abs(row_norm(kb.matrix[0]) - math.sqrt(2)) < 1e-6

    def test_halves_individually_unit(self, tmp_path, mm_text_provider, image_provider):
        kb = build_multimodal_kb(make_mm_entries(tmp_path, 10),
                                 mm_text_provider, image_provider)
        for i in range(10):
            assert abs(row_norm(kb.matrix[i, :64]) - 1.0) < 1e-6
            assert abs(row_norm(kb.matrix[i, 64:]) - 1.0) < 1e-6

    def test_metadata_alignment(self, tmp_path, mm_text_provider, image_provider):
        entries = make_mm_entries(tmp_path, 50)
        kb = build_multimodal_kb(entries, mm_text_provider, image_provider)
        assert len(kb.metadata) == 50
        for i, e in enumerate(entries):
            assert kb.metadata[i]["doc_id"] == e.doc_id

    def test_summary_preferred_for_text_half(self, tmp_path, mm_text_provider, image_provider):
        (tmp_path / "img.bin").write_bytes(b"img")
        entry = MultimodalEntry(doc_id="m1", image_ref=str(tmp_path / "img.bin"),
                                section_text="long section", summary="summary line")
        kb = build_multimodal_kb([entry], mm_text_provider, image_provider)
        expect = embed_text(mm_text_provider, "summary line").astype(np.float32)
        assert np.array_equal(kb.matrix[0, 64:], expect)

    def test_concat_dot_decomposes(self, tmp_path, mm_text_provider, image_provider):
        kb = build_multimodal_kb(make_mm_entries(tmp_path, 20),
                                 mm_text_provider, image_provider)
        rng = np.random.default_rng(5)
        q_img = rng.standard_normal(64)
        q_img /= np.linalg.norm(q_img)
        q_txt = rng.standard_normal(64)
        q_txt /= np.linalg.norm(q_txt)
        q = np.concatenate([q_img, q_txt])
        for i in range(20):
            row = kb.matrix[i].astype(np.float64)
            whole = sum(float(a) * float(b) for a, b in zip(row, q))
            parts = (sum(float(a) * float(b) for a, b in zip(row[:64], q_img))
                     + sum(float(a) * float(b) for a, b in zip(row[64:], q_txt)))
            assert abs(whole - parts) < 1e-9
            assert abs(float(kb.matrix[i] @ q) - whole) < 1e-9

    def test_missing_image(self, tmp_path, mm_text_provider, image_provider):
        entry = MultimodalEntry(doc_id="m9", image_ref=str(tmp_path / "nope.img"),
                                section_text="text")
        with pytest.raises(ImageReadError) as err:
            build_multimodal_kb([entry], mm_text_provider, image_provider)
        assert err.value.doc_id == "m9"

    def test_empty_stream(self, mm_text_provider, image_provider):
        with pytest.raises(EmptyCorpusError):
            build_multimodal_kb([], mm_text_provider, image_provider)


class TestPersistence:
    def test_round_trip_lossless(self, tmp_path, text_provider):
        kb = build_text_kb(make_passages(100), text_provider)
        bundle = tmp_path / "kb"
        save_kb(kb, bundle)
        loaded = load_kb(bundle)
        assert loaded.kind == kb.kind
        assert np.array_equal(loaded.matrix, kb.matrix)
        assert loaded.metadata == kb.metadata
        assert loaded.provider_fingerprint == kb.provider_fingerprint

    def test_resave_byte_identical(self, tmp_path, text_provider):
        kb = build_text_kb(make_passages(100), text_provider)
        save_kb(kb, tmp_path / "a")
        save_kb(load_kb(tmp_path / "a"), tmp_path / "b")
        assert ((tmp_path / "a" / EMBEDDINGS_FILE).read_bytes()
                == (tmp_path / "b" / EMBEDDINGS_FILE).read_bytes())

    def test_truncated_matrix_detected(self, tmp_path, text_provider):
        kb = build_text_kb(make_passages(10), text_provider)
        bundle = tmp_path / "kb"
        save_kb(kb, bundle)
        emb = bundle / EMBEDDINGS_FILE
        emb.write_bytes(emb.read_bytes()[:-16])
        with pytest.raises(CorruptBundleError):
            load_kb(bundle)

    def test_metadata_tamper_detected(self, tmp_path, text_provider):
        kb = build_text_kb(make_passages(5), text_provider)
        bundle = tmp_path / "kb"
        save_kb(kb, bundle)
        meta = bundle / "metadata.jsonl"
        meta.write_text(meta.read_text() + json.dumps({"doc_id": "extra"}) + "\n")
        with pytest.raises(CorruptBundleError):
            load_kb(bundle)

    def test_missing_file_detected(self, tmp_path, text_provider):
        kb = build_text_kb(make_passages(5), text_provider)
        bundle = tmp_path / "kb"
        save_kb(kb, bundle)
        (bundle / "manifest.json").unlink()
        with pytest.raises(CorruptBundleError):
            load_kb(bundle)

    def test_fingerprint_mismatch(self, tmp_path):
        kb = build_text_kb(make_passages(5), ProviderConfig(seed=7, dim=16))
        bundle = tmp_path / "kb"
        save_kb(kb, bundle)
        other = ProviderConfig(seed=8, dim=16)
        with pytest.raises(FingerprintMismatchError):
            load_kb(bundle, expected_fingerprint=other.fingerprint())
        loaded = load_kb(bundle, expected_fingerprint=other.fingerprint(),
                         allow_fingerprint_mismatch=True)
        assert len(loaded) == 5

    def test_matching_fingerprint_accepted(self, tmp_path):
        p = ProviderConfig(seed=7, dim=16)
        kb = build_text_kb(make_passages(5), p)
        save_kb(kb, tmp_path / "kb")
        loaded = load_kb(tmp_path / "kb", expected_fingerprint=p.fingerprint())
        assert len(loaded) == 5
