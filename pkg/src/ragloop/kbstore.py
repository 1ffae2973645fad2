"""Build, persist, and load the two knowledge bases.

A KB bundle is a directory of three files:

- ``metadata.jsonl``  — one JSON object per row, in row order.
- ``embeddings.bin``  — magic ``MIRAGKB1``, little-endian u32 row count,
  u32 dim, then row-major 32-bit floats.
- ``manifest.json``   — kind, provider fingerprint, row/dim counts, and
  sha256 checksums of the other two files.

Textual rows are unit-norm embeddings of the passage summary (when
present) or full text. Multimodal rows concatenate a unit image
embedding with a unit text embedding, so each row has norm sqrt(2).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .embed import ProviderConfig, embed_image, embed_text
from .errors import (
    CorruptBundleError,
    EmbeddingError,
    EmptyCorpusError,
    FingerprintMismatchError,
    ImageReadError,
    RagloopError,
    UnknownDocIdError,
)

logger = logging.getLogger(__name__)

KIND_TEXTUAL = "textual"
KIND_MULTIMODAL = "multimodal"

MAGIC = b"MIRAGKB1"

METADATA_FILE = "metadata.jsonl"
EMBEDDINGS_FILE = "embeddings.bin"
MANIFEST_FILE = "manifest.json"


@dataclass(frozen=True)
class TextPassage:
    doc_id: str
    title: str
    text: str
    summary: str | None = None
    entity_id: str | None = None


@dataclass(frozen=True)
class MultimodalEntry:
    doc_id: str
    image_ref: str
    section_text: str
    summary: str | None = None
    entity_id: str | None = None


class KbIndex:
    """Immutable embedding matrix plus row-aligned metadata.

    ``matrix`` is float32 and write-protected after construction; loaded
    indexes are therefore safe to share across threads.
    """

    def __init__(self, kind: str, matrix: np.ndarray, metadata: list[dict],
                 provider_fingerprint: str):
        if kind not in (KIND_TEXTUAL, KIND_MULTIMODAL):
            raise ValueError(f"unknown KB kind {kind!r}")
        if matrix.ndim != 2:
            raise ValueError("matrix must be 2-dimensional")
        if matrix.shape[0] != len(metadata):
            raise ValueError("row count does not match metadata count")
        self.kind = kind
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float32)
        self.matrix.flags.writeable = False
        self.metadata = metadata
        self.provider_fingerprint = provider_fingerprint
        self._row_of = {m["doc_id"]: i for i, m in enumerate(metadata)}
        if len(self._row_of) != len(metadata):
            raise ValueError("doc_ids are not unique")
        # Cached for vectorized tie-breaking in search.
        self.doc_ids = np.array([m["doc_id"] for m in metadata])

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def row_of(self, doc_id: str) -> int:
        try:
            return self._row_of[doc_id]
        except KeyError:
            raise UnknownDocIdError(doc_id) from None

    def entity_of(self, doc_id: str) -> str | None:
        return self.metadata[self.row_of(doc_id)].get("entity_id")

    def text_of(self, doc_id: str) -> str:
        """Full passage text (textual KB) or section text (multimodal KB)."""
        meta = self.metadata[self.row_of(doc_id)]
        return meta["text"] if self.kind == KIND_TEXTUAL else meta["section_text"]

    def title_of(self, doc_id: str) -> str:
        return self.metadata[self.row_of(doc_id)].get("title", "")

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._row_of


def read_image_bytes(image_ref: str, root: str | Path | None = None) -> bytes:
    """Read an image payload from a local path or http(s) URL."""
    if image_ref.startswith(("http://", "https://")):
        import requests

        resp = requests.get(image_ref, timeout=30)
        resp.raise_for_status()
        return resp.content
    path = Path(image_ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    return path.read_bytes()


def _embed_ordered(items: list, fn, workers: int) -> list[np.ndarray]:
    """Embed items preserving input order, optionally in parallel."""
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def build_text_kb(passages: Iterable[TextPassage], provider: ProviderConfig,
                  workers: int = 1) -> KbIndex:
    """Embed a passage stream into a textual KB, one row per passage.

    The embedded text is the summary when present, else the full text.
    """
    items = list(passages)
    if not items:
        raise EmptyCorpusError("no passages supplied")

    def embed_one(p: TextPassage) -> np.ndarray:
        try:
            return embed_text(provider, p.summary if p.summary else p.text)
        except RagloopError as exc:
            raise EmbeddingError(p.doc_id, exc) from exc

    rows = _embed_ordered(items, embed_one, workers)
    matrix = np.stack(rows).astype(np.float32)
    metadata = [
        {
            "doc_id": p.doc_id,
            "title": p.title,
            "text": p.text,
            "summary": p.summary,
            "entity_id": p.entity_id,
        }
        for p in items
    ]
    return KbIndex(KIND_TEXTUAL, matrix, metadata, provider.fingerprint())


def multimodal_fingerprint(image_provider: ProviderConfig,
                           text_provider: ProviderConfig) -> str:
    return f"{image_provider.fingerprint()}+{text_provider.fingerprint()}"


def build_multimodal_kb(entries: Iterable[MultimodalEntry],
                        text_provider: ProviderConfig,
                        image_provider: ProviderConfig,
                        image_root: str | Path | None = None,
                        workers: int = 1) -> KbIndex:
    """Embed image-text pairs into a multimodal KB.

    Each row is ``concat(image_embedding, text_embedding)`` with both
    halves unit-norm; the text half embeds the summary when present,
    else the section text.
    """
    items = list(entries)
    if not items:
        raise EmptyCorpusError("no entries supplied")

    def embed_one(e: MultimodalEntry) -> np.ndarray:
        try:
            image_bytes = read_image_bytes(e.image_ref, image_root)
        except OSError as exc:
            raise ImageReadError(e.doc_id, e.image_ref, exc) from exc
        try:
            img_vec = embed_image(image_provider, image_bytes)
            txt_vec = embed_text(text_provider, e.summary if e.summary else e.section_text)
        except RagloopError as exc:
            raise EmbeddingError(e.doc_id, exc) from exc
        return np.concatenate([img_vec, txt_vec])

    rows = _embed_ordered(items, embed_one, workers)
    matrix = np.stack(rows).astype(np.float32)
    metadata = [
        {
            "doc_id": e.doc_id,
            "image_ref": e.image_ref,
            "section_text": e.section_text,
            "summary": e.summary,
            "entity_id": e.entity_id,
        }
        for e in items
    ]
    return KbIndex(KIND_MULTIMODAL, matrix, metadata,
                   multimodal_fingerprint(image_provider, text_provider))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_kb(kb: KbIndex, dir_path: str | Path) -> None:
    """Write a KB bundle. Writes are deterministic byte-for-byte."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)

    meta_path = dir_path / METADATA_FILE
    with open(meta_path, "w", encoding="utf-8") as f:
        for m in kb.metadata:
            f.write(json.dumps(m, sort_keys=True, ensure_ascii=False) + "\n")

    emb_path = dir_path / EMBEDDINGS_FILE
    with open(emb_path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", len(kb), kb.dim))
        f.write(kb.matrix.astype("<f4").tobytes(order="C"))

    manifest = {
        "kind": kb.kind,
        "provider_fingerprint": kb.provider_fingerprint,
        "rows": len(kb),
        "dim": kb.dim,
        "checksums": {
            METADATA_FILE: _sha256(meta_path),
            EMBEDDINGS_FILE: _sha256(emb_path),
        },
    }
    with open(dir_path / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")


def load_kb(dir_path: str | Path, expected_fingerprint: str | None = None,
            allow_fingerprint_mismatch: bool = False) -> KbIndex:
    """Load a KB bundle, verifying structure and checksums.

    When ``expected_fingerprint`` is given and differs from the bundle's,
    raises FingerprintMismatchError unless ``allow_fingerprint_mismatch``
    downgrades it to a warning.
    """
    dir_path = Path(dir_path)
    manifest_path = dir_path / MANIFEST_FILE
    meta_path = dir_path / METADATA_FILE
    emb_path = dir_path / EMBEDDINGS_FILE
    for p in (manifest_path, meta_path, emb_path):
        if not p.exists():
            raise CorruptBundleError(f"missing bundle file {p.name}")

    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)

    for name, path in ((METADATA_FILE, meta_path), (EMBEDDINGS_FILE, emb_path)):
        recorded = manifest.get("checksums", {}).get(name)
        if recorded is not None and recorded != _sha256(path):
            raise CorruptBundleError(f"checksum mismatch for {name}")

    raw = emb_path.read_bytes()
    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptBundleError("bad embeddings header")
    rows, dim = struct.unpack_from("<II", raw, len(MAGIC))
    expected_size = len(MAGIC) + 8 + rows * dim * 4
    if len(raw) != expected_size:
        raise CorruptBundleError(
            f"embeddings file size {len(raw)} does not match header ({expected_size})"
        )
    matrix = np.frombuffer(raw, dtype="<f4", offset=len(MAGIC) + 8).reshape(rows, dim)

    metadata = []
    with open(meta_path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                metadata.append(json.loads(line))
    if len(metadata) != rows:
        raise CorruptBundleError(
            f"metadata rows ({len(metadata)}) do not match matrix rows ({rows})"
        )
    if manifest.get("rows") != rows or manifest.get("dim") != dim:
        raise CorruptBundleError("manifest row/dim counts disagree with embeddings header")

    fingerprint = manifest.get("provider_fingerprint", "")
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        if not allow_fingerprint_mismatch:
            raise FingerprintMismatchError(expected_fingerprint, fingerprint)
        logger.warning(
            "loading KB with mismatched provider fingerprint (%r != %r)",
            fingerprint, expected_fingerprint,
        )

    return KbIndex(manifest["kind"], matrix.copy(), metadata, fingerprint)
