"""Shared fixtures: deterministic providers and small prebuilt KBs."""

import numpy as np
import pytest

from ragloop.embed import ProviderConfig
from ragloop.kbstore import KbIndex, MultimodalEntry, TextPassage, build_text_kb


@pytest.fixture
def provider():
    return ProviderConfig(seed=7, dim=64)


@pytest.fixture
def text_provider():
    return ProviderConfig(seed=1, dim=64)


@pytest.fixture
def mm_text_provider():
    return ProviderConfig(seed=2, dim=64)


@pytest.fixture
def image_provider():
    return ProviderConfig(seed=3, dim=64)


def make_passages(n, prefix="t"):
    return [
        TextPassage(doc_id=f"{prefix}{i:04d}", title=f"Title {i}",
                    text=f"passage {i} text about subject {i}")
        for i in range(n)
    ]


def make_mm_entries(tmp_path, n, prefix="m"):
    image_dir = tmp_path / "images"
    image_dir.mkdir(exist_ok=True)
    entries = []
    for i in range(n):
        path = image_dir / f"{prefix}{i:04d}.img"
        path.write_bytes(f"image payload {prefix}{i}".encode())
        entries.append(MultimodalEntry(
            doc_id=f"{prefix}{i:04d}", image_ref=str(path),
            section_text=f"section {i} describing entity {i}",
        ))
    return entries


@pytest.fixture
def small_text_kb(text_provider):
    return build_text_kb(make_passages(30), text_provider)


def make_raw_kb(matrix, kind="textual", prefix="d"):
    """KbIndex straight from a hand matrix (row i -> doc '<prefix><i>')."""
    matrix = np.asarray(matrix, dtype=np.float32)
    metadata = [
        {"doc_id": f"{prefix}{i:03d}", "title": "", "text": f"doc {i}",
         "section_text": f"doc {i}", "summary": None, "entity_id": None}
        for i in range(matrix.shape[0])
    ]
    return KbIndex(kind, matrix, metadata, "test-fingerprint")
