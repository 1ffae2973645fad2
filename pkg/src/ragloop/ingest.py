"""Benchmark loading and the greedy similarity-threshold downsampler.

Sample JSONL schema::

    {"sample_id": ..., "image": ..., "question": ...,
     "answers": [...], "entity_ids": [...], "annotator_answers": [...]}

``entity_ids`` and ``annotator_answers`` are optional. Image refs resolve
against the benchmark's image root.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embed import ProviderConfig, embed_text
from .errors import DuplicateIdError, MissingImageError, SchemaError
from .kbstore import MultimodalEntry, TextPassage, read_image_bytes
from .llm import FewshotDemo
from .pipeline import Sample

logger = logging.getLogger(__name__)


@dataclass
class BenchmarkSpec:
    name: str
    samples_path: str
    image_root: str | None = None
    answer_mode: str = "free-form"
    annotator_answers_path: str | None = None


def _require(obj: dict, field_name: str, line_no: int, cls=str):
    value = obj.get(field_name)
    if value is None:
        raise SchemaError(line_no, field_name, "missing")
    if cls is str and (not isinstance(value, str) or not value.strip()):
        raise SchemaError(line_no, field_name, "must be a nonempty string")
    if cls is list and (not isinstance(value, list) or not value):
        raise SchemaError(line_no, field_name, "must be a nonempty list")
    return value


def load_benchmark(spec: BenchmarkSpec, missing_image: str = "warn") -> list[Sample]:
    """Load and validate samples in file order.

    ``missing_image`` is "warn" (skip the sample and count it) or
    "fatal". Without an image_root, refs are taken as-is and not checked.
    """
    annotator_map: dict[str, list[str]] = {}
    if spec.annotator_answers_path:
        with open(spec.annotator_answers_path, encoding="utf-8") as f:
            annotator_map = {k: list(v) for k, v in json.load(f).items()}

    samples: list[Sample] = []
    seen: set[str] = set()
    skipped = 0
    root = Path(spec.image_root) if spec.image_root else None
    with open(spec.samples_path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(line_no, "<line>", f"invalid JSON: {exc.msg}") from exc

            sample_id = _require(obj, "sample_id", line_no)
            if sample_id in seen:
                raise DuplicateIdError(sample_id, line_no)
            seen.add(sample_id)

            image = _require(obj, "image", line_no)
            question = _require(obj, "question", line_no)
            answers = _require(obj, "answers", line_no, list)
            entity_ids = obj.get("entity_ids") or []
            if not isinstance(entity_ids, list):
                raise SchemaError(line_no, "entity_ids", "must be a list")

            image_ref = image
            if root is not None:
                resolved = root / image
                if not resolved.exists():
                    if missing_image == "fatal":
                        raise MissingImageError(f"line {line_no}: image {image!r} not found")
                    skipped += 1
                    continue
                image_ref = str(resolved)

            annotator = obj.get("annotator_answers", annotator_map.get(sample_id))
            samples.append(Sample(
                sample_id=sample_id,
                image_ref=image_ref,
                question=question,
                gold_answers=[str(a) for a in answers],
                gold_entity_ids=[str(e) for e in entity_ids],
                annotator_answers=[str(a) for a in annotator] if annotator else None,
            ))
    if skipped:
        logger.warning("skipped %d sample(s) with missing images", skipped)
    return samples


def save_samples(samples: list[Sample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in samples:
            f.write(json.dumps(s.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")


def load_text_corpus(path: str | Path) -> list[TextPassage]:
    """JSONL of {doc_id, title, text, summary?, entity_id?}."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(TextPassage(
                doc_id=_require(obj, "doc_id", line_no),
                title=obj.get("title", ""),
                text=_require(obj, "text", line_no),
                summary=obj.get("summary"),
                entity_id=obj.get("entity_id"),
            ))
    return out


def load_multimodal_corpus(path: str | Path) -> list[MultimodalEntry]:
    """JSONL of {doc_id, image_ref, section_text, summary?, entity_id?}."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(MultimodalEntry(
                doc_id=_require(obj, "doc_id", line_no),
                image_ref=_require(obj, "image_ref", line_no),
                section_text=_require(obj, "section_text", line_no),
                summary=obj.get("summary"),
                entity_id=obj.get("entity_id"),
            ))
    return out


def load_fewshot_pool(path: str | Path, image_root: str | Path | None = None) -> list[FewshotDemo]:
    """JSONL of {image, context, question, answer}; images load eagerly."""
    out = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            out.append(FewshotDemo(
                image=read_image_bytes(_require(obj, "image", line_no), image_root),
                context=obj.get("context", ""),
                question=_require(obj, "question", line_no),
                answer=_require(obj, "answer", line_no),
            ))
    return out


def _question_matrix(samples: list[Sample], provider: ProviderConfig) -> np.ndarray:
    return np.stack([embed_text(provider, s.question) for s in samples])


def _greedy_keep(embeddings: np.ndarray, t: float) -> list[int]:
    """Greedy pass in input order: keep an item iff its similarity to every
    previously kept item is <= t (strictly greater means redundant)."""
    kept: list[int] = []
    kept_rows: list[np.ndarray] = []
    for i in range(embeddings.shape[0]):
        if kept_rows:
            sims = np.stack(kept_rows) @ embeddings[i]
            if float(sims.max()) > t:
                continue
        kept.append(i)
        kept_rows.append(embeddings[i])
    return kept


def downsample(samples: list[Sample], provider: ProviderConfig, t: float) -> list[Sample]:
    """Greedy redundancy filter over question embeddings.

    Order-dependent by design: the first of two near-duplicates wins.
    Output preserves input order and contains no pair with cosine
    similarity above ``t``.
    """
    if not np.isfinite(t):
        raise ValueError("threshold must be finite")
    if not samples:
        return []
    embeddings = _question_matrix(samples, provider)
    return [samples[i] for i in _greedy_keep(embeddings, t)]


def tune_threshold(samples: list[Sample], provider: ProviderConfig, target_count: int,
                   tolerance: float = 0.02, max_steps: int = 60) -> tuple[float, list[Sample]]:
    """Bisect the threshold until the kept count lands within
    ``tolerance`` (fractional) of ``target_count``.

    The kept count is monotone nondecreasing in t. Raises ValueError when
    no threshold reaches the tolerance band (e.g. too few inputs).
    """
    if target_count <= 0:
        raise ValueError("target_count must be positive")
    if not samples:
        raise ValueError("no samples to downsample")
    embeddings = _question_matrix(samples, provider)
    lo, hi = -1.0, 1.0
    best: tuple[int, float, list[int]] | None = None
    for _ in range(max_steps):
        mid = (lo + hi) / 2.0
        kept = _greedy_keep(embeddings, mid)
        gap = abs(len(kept) - target_count)
        if best is None or gap < best[0]:
            best = (gap, mid, kept)
        if gap <= tolerance * target_count:
            break
        if len(kept) < target_count:
            lo = mid
        else:
            hi = mid
    gap, t, kept = best
    if gap > tolerance * target_count:
        raise ValueError(
            f"cannot reach {target_count} +/- {tolerance:.0%}: closest was {len(kept)} at t={t:.4f}"
        )
    return t, [samples[i] for i in kept]
