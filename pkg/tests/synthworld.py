"""Synthetic scripted benchmark worlds for pipeline and acceptance tests.

A world pairs a generated corpus with a response script so full runs are
deterministic. Sample j's gold multimodal doc is reachable at iteration 0
(its image and section text match the sample's initial expanded query
exactly), except for *planted* samples whose gold doc is reachable only
through the scripted iteration-2 sub-query: its image is unrelated and
its section text appears nowhere but in that generated question.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

from ragloop.config import load_config
from ragloop.embed import ProviderConfig
from ragloop.kbstore import (
    MultimodalEntry,
    TextPassage,
    build_multimodal_kb,
    build_text_kb,
    load_kb,
    save_kb,
)
from ragloop.llm import LlmClient
from ragloop.pipeline import KbSet, Pipeline
from ragloop.prompts import KIND_QUERY_EXPANSION, render_prompt

PLANT_ITERATION = 2


@dataclass
class SynthWorld:
    root: Path
    n_samples: int
    iterations: int
    planted_ids: set[str]
    planted_text: dict[str, str]
    config_path: Path
    benchmark_path: Path
    script_path: Path
    text_kb_dir: Path
    mm_kb_dir: Path
    images_dir: Path
    gold_doc_of: dict[str, str] = field(default_factory=dict)

    def sample_ids(self):
        return [f"s{j:04d}" for j in range(self.n_samples)]


def _description(j):
    return f"a photo of item {j} with distinctive features"


def _question(j):
    return f"What is the subject of item {j}?"


def _record(j, i):
    return f"reasoning record {i} about item {j}"


def _final_answer(j):
    if j % 2 == 0:
        return f"answer {j}"
    return f"The answer is answer {j}"


def build_world(root: Path, n_samples=200, n_docs=1000, n_planted=60,
                iterations=4, text_k=20, mm_k=10, parallelism=1) -> SynthWorld:
    root = Path(root)
    images = root / "images"
    images.mkdir(parents=True, exist_ok=True)

    text_provider = ProviderConfig(seed=1, dim=64)
    mm_text_provider = ProviderConfig(seed=2, dim=64)
    image_provider = ProviderConfig(seed=3, dim=64)

    planted_ids = {f"s{j:04d}" for j in range(n_planted)}
    planted_text = {}
    gold_doc_of = {}

    # --- benchmark samples ---
    benchmark_path = root / "benchmark.jsonl"
    sample_image_bytes = {}
    with open(benchmark_path, "w", encoding="utf-8") as f:
        for j in range(n_samples):
            sid = f"s{j:04d}"
            img_name = f"{sid}.img"
            payload = f"sample-image-{j}".encode()
            (images / img_name).write_bytes(payload)
            sample_image_bytes[sid] = payload
            f.write(json.dumps({
                "sample_id": sid,
                "image": img_name,
                "question": _question(j),
                "answers": [f"answer {j}"],
                "entity_ids": [f"ent-{sid}"],
                "annotator_answers": [f"answer {j}"] * 3 + [f"distractor {i}" for i in range(7)],
            }) + "\n")

    # --- multimodal corpus: one gold doc per sample, rest noise ---
    mm_entries = []
    for j in range(n_docs):
        doc_id = f"m{j:04d}"
        if j < n_samples:
            sid = f"s{j:04d}"
            gold_doc_of[sid] = doc_id
            if sid in planted_ids:
                secret = f"hidden fact needed for item {j}"
                planted_text[sid] = secret
                img_path = images / f"planted-{j}.img"
                img_path.write_bytes(f"planted-image-{j}".encode())
                mm_entries.append(MultimodalEntry(
                    doc_id=doc_id, image_ref=str(img_path),
                    section_text=secret, entity_id=f"ent-{sid}"))
            else:
                expanded0 = render_prompt(KIND_QUERY_EXPANSION, question=_question(j),
                                          reasoning_record=_description(j))
                mm_entries.append(MultimodalEntry(
                    doc_id=doc_id, image_ref=str(images / f"{sid}.img"),
                    section_text=expanded0, entity_id=f"ent-{sid}"))
        else:
            img_path = images / f"noise-{j}.img"
            img_path.write_bytes(f"noise-image-{j}".encode())
            mm_entries.append(MultimodalEntry(
                doc_id=doc_id, image_ref=str(img_path),
                section_text=f"noise section {j} with filler content"))

    # --- text corpus: gold passage embeds as the iteration-0 expanded
    # query (summary) and carries the answer string in its body (PRR) ---
    passages = []
    for j in range(n_docs):
        doc_id = f"t{j:04d}"
        if j < n_samples:
            sid = f"s{j:04d}"
            expanded0 = render_prompt(KIND_QUERY_EXPANSION, question=_question(j),
                                      reasoning_record=_description(j))
            passages.append(TextPassage(
                doc_id=doc_id, title=f"Item {j}",
                text=f"Everything about item {j}. The answer is answer {j}.",
                summary=expanded0, entity_id=f"ent-{sid}"))
        else:
            passages.append(TextPassage(
                doc_id=doc_id, title=f"Filler {j}",
                text=f"filler passage {j} about nothing in particular"))

    text_kb_dir = root / "kb_text"
    mm_kb_dir = root / "kb_mm"
    save_kb(build_text_kb(passages, text_provider), text_kb_dir)
    save_kb(build_multimodal_kb(mm_entries, mm_text_provider, image_provider), mm_kb_dir)

    # --- response script ---
    script_path = root / "script.jsonl"
    with open(script_path, "w", encoding="utf-8") as f:
        def emit(kind, sid, iteration, response):
            f.write(json.dumps({
                "key": {"kind": kind, "sample_id": sid, "iteration": iteration},
                "response": response,
            }) + "\n")

        for j in range(n_samples):
            sid = f"s{j:04d}"
            emit("initial-description", sid, 0, _description(j))
            for i in range(iterations + 1):
                emit("record-generation", sid, i, _record(j, i))
                # final answer scripted at every depth so shorter runs
                # (ablation arms) stay scripted
                emit("final-answer", sid, i, _final_answer(j))
            for i in range(1, iterations + 1):
                q1 = f"followup {i}.1 for item {j}"
                if sid in planted_ids and i == PLANT_ITERATION:
                    q2 = planted_text[sid]
                else:
                    q2 = f"followup {i}.2 for item {j}"
                emit("query-generation", sid, i,
                     f"## Analysis\nLooking for more about item {j}.\n"
                     f"## Queries\nQuestion 1: {q1}\nQuestion 2: {q2}\n")

    # --- run config ---
    config_path = root / "config.json"
    config_path.write_text(json.dumps({
        "iterations": iterations,
        "budget": {"text_k": text_k, "mm_k": mm_k},
        "answer_mode": "free-form",
        "parallelism": parallelism,
        "seed": 0,
        "providers": {
            "text": {"kind": "deterministic-reference", "seed": 1, "dim": 64},
            "mm_text": {"kind": "deterministic-reference", "seed": 2, "dim": 64},
            "image": {"kind": "deterministic-reference", "seed": 3, "dim": 64},
        },
        "llm": {"mode": "scripted", "script_path": str(script_path)},
        "paths": {
            "text_kb": str(text_kb_dir),
            "mm_kb": str(mm_kb_dir),
            "benchmark": str(benchmark_path),
            "image_root": str(images),
            "output": str(root / "results.jsonl"),
        },
    }, indent=2))

    return SynthWorld(
        root=root, n_samples=n_samples, iterations=iterations,
        planted_ids=planted_ids, planted_text=planted_text,
        config_path=config_path, benchmark_path=benchmark_path,
        script_path=script_path, text_kb_dir=text_kb_dir, mm_kb_dir=mm_kb_dir,
        images_dir=images, gold_doc_of=gold_doc_of,
    )


def make_pipeline(world: SynthWorld, **overrides) -> Pipeline:
    """Build a Pipeline the same way the CLI does, with config overrides."""
    cfg = load_config(world.config_path)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    kbs = KbSet(text=load_kb(world.text_kb_dir), mm=load_kb(world.mm_kb_dir))
    return Pipeline(kbs, cfg, LlmClient(cfg.llm))
