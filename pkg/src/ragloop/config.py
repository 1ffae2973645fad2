"""Run configuration: a single JSON file drives every command.

CLI flags override file values; see the README for the documented schema.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .embed import ProviderConfig
from .errors import ConfigError
from .llm import LlmConfig
from .search import RetrievalBudget

ANSWER_FREE_FORM = "free-form"
ANSWER_EXACT_ENTITY = "exact-entity"

KB_BOTH = "both"
KB_TEXTUAL_ONLY = "textual-only"
KB_MULTIMODAL_ONLY = "multimodal-only"


@dataclass(frozen=True)
class ProviderSet:
    """The three embedding roles: textual-KB queries, multimodal-KB text
    halves, and images. Query-side providers must match the KB-side ones,
    which is enforced via bundle fingerprints at load."""

    text: ProviderConfig
    mm_text: ProviderConfig
    image: ProviderConfig


@dataclass
class RunConfig:
    providers: ProviderSet
    llm: LlmConfig
    paths: dict[str, str] = field(default_factory=dict)
    iterations: int = 4
    budget: RetrievalBudget = field(default_factory=RetrievalBudget)
    answer_mode: str = ANSWER_FREE_FORM
    kb_mode: str = KB_BOTH
    enable_generation: bool = True
    parallelism: int = 1
    seed: int = 0
    fewshot_pool: str | None = None
    fewshot_demos: int = 3
    recall_ks: tuple[int, ...] = (5, 10, 20)
    k_per_iter: int = 5

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if self.answer_mode not in (ANSWER_FREE_FORM, ANSWER_EXACT_ENTITY):
            raise ConfigError(f"unknown answer_mode {self.answer_mode!r}")
        if self.kb_mode not in (KB_BOTH, KB_TEXTUAL_ONLY, KB_MULTIMODAL_ONLY):
            raise ConfigError(f"unknown kb_mode {self.kb_mode!r}")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be >= 1")

    def effective_budget(self) -> RetrievalBudget:
        """Budget after applying the KB-mode ablation toggle."""
        if self.kb_mode == KB_TEXTUAL_ONLY:
            return RetrievalBudget(self.budget.text_k, 0)
        if self.kb_mode == KB_MULTIMODAL_ONLY:
            return RetrievalBudget(0, self.budget.mm_k)
        return self.budget

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "budget": {"text_k": self.budget.text_k, "mm_k": self.budget.mm_k},
            "answer_mode": self.answer_mode,
            "kb_mode": self.kb_mode,
            "enable_generation": self.enable_generation,
            "parallelism": self.parallelism,
            "seed": self.seed,
            "fewshot_demos": self.fewshot_demos,
            "recall_ks": list(self.recall_ks),
            "k_per_iter": self.k_per_iter,
            "providers": {
                "text": self.providers.text.fingerprint(),
                "mm_text": self.providers.mm_text.fingerprint(),
                "image": self.providers.image.fingerprint(),
            },
            "llm": {"mode": self.llm.mode, "model": self.llm.model},
        }


def _provider_from_dict(d: dict, default_seed: int = 0) -> ProviderConfig:
    try:
        return ProviderConfig(
            kind=d.get("kind", "deterministic-reference"),
            dim=int(d.get("dim", 64)),
            seed=int(d.get("seed", default_seed)),
            endpoint=d.get("endpoint"),
            model_name=d.get("model_name"),
            api_key_env=d.get("api_key_env", "MIRAG_API_KEY"),
            max_in_flight=int(d.get("max_in_flight", 8)),
            max_retries=int(d.get("max_retries", 3)),
            timeout=float(d.get("timeout", 30.0)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad provider config: {exc}") from exc


def _llm_from_dict(d: dict) -> LlmConfig:
    try:
        return LlmConfig(
            mode=d.get("mode", "scripted"),
            endpoint=d.get("endpoint"),
            model=d.get("model"),
            temperature=float(d.get("temperature", 0.0)),
            max_tokens=int(d.get("max_tokens", 1024)),
            script_path=d.get("script_path"),
            api_key_env=d.get("api_key_env", "MIRAG_API_KEY"),
            timeout=float(d.get("timeout", 60.0)),
            max_retries=int(d.get("max_retries", 3)),
            max_in_flight=int(d.get("max_in_flight", 4)),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad llm config: {exc}") from exc


def load_config(path: str | Path) -> RunConfig:
    """Parse a run-config JSON file. Raises ConfigError on any problem."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    seed = int(raw.get("seed", 0))
    prov = raw.get("providers", {})
    providers = ProviderSet(
        text=_provider_from_dict(prov.get("text", {}), seed),
        mm_text=_provider_from_dict(prov.get("mm_text", {}), seed),
        image=_provider_from_dict(prov.get("image", {}), seed),
    )
    b = raw.get("budget", {})
    try:
        budget = RetrievalBudget(int(b.get("text_k", 20)), int(b.get("mm_k", 10)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    return RunConfig(
        providers=providers,
        llm=_llm_from_dict(raw.get("llm", {})),
        paths=dict(raw.get("paths", {})),
        iterations=int(raw.get("iterations", 4)),
        budget=budget,
        answer_mode=raw.get("answer_mode", ANSWER_FREE_FORM),
        kb_mode=raw.get("kb_mode", KB_BOTH),
        enable_generation=bool(raw.get("enable_generation", True)),
        parallelism=int(raw.get("parallelism", 1)),
        seed=seed,
        fewshot_pool=raw.get("fewshot_pool"),
        fewshot_demos=int(raw.get("fewshot_demos", 3)),
        recall_ks=tuple(raw.get("recall_ks", (5, 10, 20))),
        k_per_iter=int(raw.get("k_per_iter", 5)),
    )
