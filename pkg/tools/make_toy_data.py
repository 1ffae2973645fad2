#!/usr/bin/env python3
"""Regenerate the bundled toy corpus under data/toy/.

Produces a 6-sample benchmark, a 40-passage text corpus, a 30-pair
multimodal corpus, a scripted-response file covering a 2-iteration run,
and a run config with repo-relative paths. Each sample's gold documents
are engineered to surface at iteration 0 (their embedded text equals the
sample's initial expanded query and the pair image matches the sample
image), so the smoke run produces non-trivial metrics.

Run from the repository root: python3 tools/make_toy_data.py
"""

import json
from pathlib import Path

from ragloop.prompts import KIND_QUERY_EXPANSION, render_prompt

ROOT = Path(__file__).resolve().parent.parent
TOY = ROOT / "data" / "toy"

N_SAMPLES = 6
N_PASSAGES = 40
N_PAIRS = 30
ITERATIONS = 2

SUBJECTS = ["red lighthouse", "stone bridge", "market hall",
            "observatory dome", "iron water tower", "tram depot"]


def question(j):
    return f"What is the name of this {SUBJECTS[j]}?"


def description(j):
    return f"a photo of a {SUBJECTS[j]} numbered {j}"


def answer(j):
    return f"landmark {j}"


def expanded0(j):
    return render_prompt(KIND_QUERY_EXPANSION, question=question(j),
                         reasoning_record=description(j))


def main():
    images = TOY / "images"
    images.mkdir(parents=True, exist_ok=True)

    with open(TOY / "benchmark.jsonl", "w", encoding="utf-8") as f:
        for j in range(N_SAMPLES):
            name = f"sample{j}.img"
            (images / name).write_bytes(f"toy-sample-image-{j}".encode())
            f.write(json.dumps({
                "sample_id": f"toy{j:02d}",
                "image": name,
                "question": question(j),
                "answers": [answer(j)],
                "entity_ids": [f"ent-toy{j:02d}"],
                "annotator_answers": [answer(j)] * 4 + [f"other {i}" for i in range(6)],
            }) + "\n")

    with open(TOY / "passages.jsonl", "w", encoding="utf-8") as f:
        for j in range(N_PASSAGES):
            if j < N_SAMPLES:
                f.write(json.dumps({
                    "doc_id": f"tp{j:03d}",
                    "title": f"{SUBJECTS[j].title()} {j}",
                    "text": f"The {SUBJECTS[j]} shown here is called landmark {j}. "
                            f"It was registered under entry {j}.",
                    "summary": expanded0(j),
                    "entity_id": f"ent-toy{j:02d}",
                }) + "\n")
            else:
                f.write(json.dumps({
                    "doc_id": f"tp{j:03d}",
                    "title": f"Filler {j}",
                    "text": f"Filler passage {j} about an unrelated subject.",
                }) + "\n")

    with open(TOY / "mm_corpus.jsonl", "w", encoding="utf-8") as f:
        for j in range(N_PAIRS):
            if j < N_SAMPLES:
                f.write(json.dumps({
                    "doc_id": f"mp{j:03d}",
                    "image_ref": f"sample{j}.img",
                    "section_text": expanded0(j),
                    "entity_id": f"ent-toy{j:02d}",
                }) + "\n")
            else:
                (images / f"pair{j}.img").write_bytes(f"toy-pair-image-{j}".encode())
                f.write(json.dumps({
                    "doc_id": f"mp{j:03d}",
                    "image_ref": f"pair{j}.img",
                    "section_text": f"An unrelated pair {j} with its own caption.",
                }) + "\n")

    with open(TOY / "script.jsonl", "w", encoding="utf-8") as f:
        def emit(kind, sid, iteration, response):
            f.write(json.dumps({
                "key": {"kind": kind, "sample_id": sid, "iteration": iteration},
                "response": response,
            }) + "\n")

        for j in range(N_SAMPLES):
            sid = f"toy{j:02d}"
            emit("initial-description", sid, 0, description(j))
            final = answer(j) if j % 2 == 0 else f"It is {answer(j)}."
            for i in range(ITERATIONS + 1):
                emit("record-generation", sid, i,
                     f"The {SUBJECTS[j]} is landmark {j} (record {i}).")
                # scripted at every depth so shorter --iterations runs work
                emit("final-answer", sid, i, final)
            for i in range(1, ITERATIONS + 1):
                emit("query-generation", sid, i,
                     "## Analysis\nStill confirming the name.\n## Queries\n"
                     f"Question 1: Where is the {SUBJECTS[j]} located?\n"
                     f"Question 2: When was landmark {j} built?\n")

    (TOY / "config.json").write_text(json.dumps({
        "iterations": ITERATIONS,
        "budget": {"text_k": 20, "mm_k": 10},
        "answer_mode": "free-form",
        "parallelism": 2,
        "seed": 0,
        "providers": {
            "text": {"kind": "deterministic-reference", "seed": 1, "dim": 64},
            "mm_text": {"kind": "deterministic-reference", "seed": 2, "dim": 64},
            "image": {"kind": "deterministic-reference", "seed": 3, "dim": 64},
        },
        "llm": {"mode": "scripted", "script_path": "data/toy/script.jsonl"},
        "paths": {
            "text_kb": "out/toy/kb_text",
            "mm_kb": "out/toy/kb_mm",
            "benchmark": "data/toy/benchmark.jsonl",
            "image_root": "data/toy/images",
            "output": "out/toy/results.jsonl",
        },
    }, indent=2) + "\n")

    print(f"wrote toy corpus under {TOY}")


if __name__ == "__main__":
    main()
