"""Command-line entry points: build-index, run, eval, downsample.

All commands are driven by one JSON config file; flags override file
values. Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from .config import RunConfig, load_config
from .errors import ConfigError, RagloopError
from .ingest import (
    BenchmarkSpec,
    downsample,
    load_benchmark,
    load_fewshot_pool,
    load_multimodal_corpus,
    load_text_corpus,
    save_samples,
    tune_threshold,
)
from .kbstore import (
    KIND_MULTIMODAL,
    KIND_TEXTUAL,
    build_multimodal_kb,
    build_text_kb,
    load_kb,
    multimodal_fingerprint,
    save_kb,
)
from .llm import LlmClient
from .metrics import KbLookup, ReportConfig, build_report, format_table
from .pipeline import KbSet, Pipeline, load_results

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


def cmd_build_index(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    t0 = time.perf_counter()
    if args.kind == KIND_TEXTUAL:
        passages = load_text_corpus(args.corpus)
        kb = build_text_kb(passages, cfg.providers.text, workers=args.workers)
    else:
        entries = load_multimodal_corpus(args.corpus)
        kb = build_multimodal_kb(entries, cfg.providers.mm_text, cfg.providers.image,
                                 image_root=args.image_root, workers=args.workers)
    save_kb(kb, args.out)
    elapsed = time.perf_counter() - t0
    print(f"built {kb.kind} KB: {len(kb)} rows, dim {kb.dim}, {elapsed:.2f}s -> {args.out}")
    return EXIT_OK


def _apply_run_overrides(cfg: RunConfig, args: argparse.Namespace) -> None:
    if args.iterations is not None:
        if args.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        cfg.iterations = args.iterations
    if args.text_k is not None or args.mm_k is not None:
        from .search import RetrievalBudget

        cfg.budget = RetrievalBudget(
            args.text_k if args.text_k is not None else cfg.budget.text_k,
            args.mm_k if args.mm_k is not None else cfg.budget.mm_k,
        )
    if args.no_generation:
        cfg.enable_generation = False
    if args.kb is not None:
        cfg.kb_mode = args.kb
    if args.parallelism is not None:
        cfg.parallelism = args.parallelism
    if args.answer_mode is not None:
        cfg.answer_mode = args.answer_mode
    if args.benchmark is not None:
        cfg.paths["benchmark"] = args.benchmark
    if args.out is not None:
        cfg.paths["output"] = args.out


def _load_kbs(cfg: RunConfig, allow_mismatch: bool) -> KbSet:
    budget = cfg.effective_budget()
    kbs = KbSet()
    if budget.text_k > 0:
        path = cfg.paths.get("text_kb")
        if not path:
            raise ConfigError("config paths.text_kb is required for this KB mode")
        kbs.text = load_kb(path, expected_fingerprint=cfg.providers.text.fingerprint(),
                           allow_fingerprint_mismatch=allow_mismatch)
    if budget.mm_k > 0:
        path = cfg.paths.get("mm_kb")
        if not path:
            raise ConfigError("config paths.mm_kb is required for this KB mode")
        expected = multimodal_fingerprint(cfg.providers.image, cfg.providers.mm_text)
        kbs.mm = load_kb(path, expected_fingerprint=expected,
                         allow_fingerprint_mismatch=allow_mismatch)
    return kbs


def cmd_run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    _apply_run_overrides(cfg, args)
    benchmark_path = cfg.paths.get("benchmark")
    out_path = cfg.paths.get("output")
    if not benchmark_path:
        raise ConfigError("no benchmark path (config paths.benchmark or --benchmark)")
    if not out_path:
        raise ConfigError("no output path (config paths.output or --out)")

    kbs = _load_kbs(cfg, args.allow_fingerprint_mismatch)
    samples = load_benchmark(BenchmarkSpec(
        name=Path(benchmark_path).stem,
        samples_path=benchmark_path,
        image_root=cfg.paths.get("image_root"),
    ))
    if not samples:
        raise ConfigError("benchmark contains no usable samples")

    pool = None
    if cfg.fewshot_pool:
        pool = load_fewshot_pool(cfg.fewshot_pool, cfg.paths.get("image_root"))

    pipeline = Pipeline(kbs, cfg, LlmClient(cfg.llm), fewshot_pool=pool)
    results = pipeline.run_benchmark(samples, out_path, resume=args.resume)

    failed = [r.sample_id for r in results if r.failed]
    print(f"completed {len(results) - len(failed)}/{len(results)} samples -> {out_path}",
          file=sys.stderr)
    if failed:
        print(f"failed samples: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_ks(raw: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(p) for p in raw.split(",") if p.strip())
    except ValueError:
        raise ConfigError(f"bad k list {raw!r}; expected e.g. 5,10,20") from None
    if not ks or any(k <= 0 for k in ks):
        raise ConfigError("k values must be positive")
    return ks


def cmd_eval(args: argparse.Namespace) -> int:
    results = load_results(args.results)
    samples = load_benchmark(BenchmarkSpec(
        name=Path(args.benchmark).stem, samples_path=args.benchmark))
    golds = {s.sample_id: s for s in samples}

    text_kb = load_kb(args.text_kb) if args.text_kb else None
    mm_kb = load_kb(args.mm_kb) if args.mm_kb else None

    ks = _parse_ks(args.recall_ks)
    report = build_report(results, golds, KbLookup(text_kb, mm_kb),
                          ReportConfig(recall_ks=ks, prr_ks=ks,
                                       k_per_iter=args.k_per_iter,
                                       echo={"results": str(args.results),
                                             "benchmark": str(args.benchmark)}))
    out = Path(args.out) if args.out else Path(args.results).with_suffix(".report.json")
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(format_table(report))
    print(f"report -> {out}", file=sys.stderr)
    return EXIT_OK


def cmd_downsample(args: argparse.Namespace) -> int:
    samples = load_benchmark(BenchmarkSpec(name="input", samples_path=args.input))
    if not samples:
        raise RagloopError("input benchmark is empty")

    if args.config:
        provider = load_config(args.config).providers.text
    else:
        from .embed import ProviderConfig

        provider = ProviderConfig(seed=args.seed, dim=args.dim)

    if args.target_count is not None:
        try:
            t, subset = tune_threshold(samples, provider, args.target_count,
                                       tolerance=args.tolerance)
        except ValueError as exc:
            raise RagloopError(str(exc)) from exc
        print(f"tuned threshold t={t:.4f}", file=sys.stderr)
    else:
        subset = downsample(samples, provider, args.threshold)

    save_samples(subset, args.output)
    print(f"kept {len(subset)}/{len(samples)} samples -> {args.output}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ragloop",
        description="Iterative multimodal retrieval-augmented generation engine",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="embed a corpus into a KB bundle")
    p.add_argument("--kind", choices=[KIND_TEXTUAL, KIND_MULTIMODAL], required=True)
    p.add_argument("--corpus", required=True, help="corpus JSONL path")
    p.add_argument("--out", required=True, help="bundle output directory")
    p.add_argument("--config", required=True, help="run-config JSON (providers)")
    p.add_argument("--image-root", default=None, help="base dir for relative image refs")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("run", help="run the retrieval loop over a benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--benchmark", default=None, help="override config paths.benchmark")
    p.add_argument("--out", default=None, help="override config paths.output")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--text-k", type=int, default=None)
    p.add_argument("--mm-k", type=int, default=None)
    p.add_argument("--no-generation", action="store_true",
                   help="disable sub-query generation (expansion-only ablation)")
    p.add_argument("--kb", choices=["both", "textual-only", "multimodal-only"], default=None)
    p.add_argument("--answer-mode", choices=["free-form", "exact-entity"], default=None)
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--resume", action="store_true",
                   help="skip sample_ids already present in the output file")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a results dump against gold data")
    p.add_argument("--results", required=True, help="RunResult JSONL")
    p.add_argument("--benchmark", required=True, help="gold benchmark JSONL")
    p.add_argument("--text-kb", default=None, help="textual KB bundle dir (for PRR text)")
    p.add_argument("--mm-kb", default=None, help="multimodal KB bundle dir (for entity recall)")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--recall-ks", default="5,10,20")
    p.add_argument("--k-per-iter", type=int, default=5)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("downsample", help="greedy similarity-threshold subset")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--threshold", type=float, default=None)
    group.add_argument("--target-count", type=int, default=None)
    p.add_argument("--tolerance", type=float, default=0.02)
    p.add_argument("--config", default=None, help="run-config JSON for the provider")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.set_defaults(func=cmd_downsample)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"missing input: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RagloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
