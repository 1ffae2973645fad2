"""Embedding providers for text and image inputs.

Two provider kinds share one config type:

- ``deterministic-reference``: hashes the input (plus the provider seed) to
  seed a Gaussian draw, then L2-normalizes. A pure function of
  (seed, input), so tests and scripted pipeline runs are fully
  reproducible without any model.
- ``remote-http``: minimal JSON POST ``{"model": ..., "input": [...]}``
  returning ``{"data": [{"embedding": [...]}]}``, the de-facto embeddings
  API shape. Retries with exponential backoff on 429/5xx and caps
  concurrent in-flight requests per endpoint.

All vectors leave this module unit-norm in float64.
"""

from __future__ import annotations

import base64
import hashlib
import logging
import os
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .errors import EmptyInputError, RemoteError, ZeroVectorError

logger = logging.getLogger(__name__)

PROVIDER_DETERMINISTIC = "deterministic-reference"
PROVIDER_REMOTE = "remote-http"

DEFAULT_DIM = 64
DEFAULT_API_KEY_ENV = "MIRAG_API_KEY"

_DOMAIN_TEXT = b"text"
_DOMAIN_IMAGE = b"image"


@dataclass(frozen=True)
class ProviderConfig:
    """Configuration for one embedding provider instance.

    Providers are immutable after construction and safe to share across
    threads. ``dim`` is fixed per instance; every vector it produces has
    exactly that length.
    """

    kind: str = PROVIDER_DETERMINISTIC
    dim: int = DEFAULT_DIM
    seed: int = 0
    endpoint: str | None = None
    model_name: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    max_in_flight: int = 8
    max_retries: int = 3
    backoff_base: float = 0.5
    timeout: float = 30.0

    def __post_init__(self):
        if self.kind not in (PROVIDER_DETERMINISTIC, PROVIDER_REMOTE):
            raise ValueError(f"unknown provider kind {self.kind!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if self.kind == PROVIDER_REMOTE and not self.endpoint:
            raise ValueError("remote-http provider requires an endpoint")

    def fingerprint(self) -> str:
        """Stable identity string recorded in KB bundles and checked on load."""
        if self.kind == PROVIDER_DETERMINISTIC:
            return f"{self.kind}:seed={self.seed}:dim={self.dim}"
        return f"{self.kind}:model={self.model_name}:dim={self.dim}"


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale ``v`` to unit L2 norm, preserving direction.

    Raises ZeroVectorError when every component is zero; such a vector has
    no direction and must not be indexed.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVectorError("cannot normalize an all-zero vector")
    return v / norm


def _stable_hash64(seed: int, domain: bytes, payload: bytes) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(seed.to_bytes(8, "little", signed=True))
    h.update(domain)
    h.update(payload)
    return int.from_bytes(h.digest(), "little")


def _deterministic_vector(provider: ProviderConfig, domain: bytes, payload: bytes) -> np.ndarray:
    rng = np.random.default_rng(_stable_hash64(provider.seed, domain, payload))
    return l2_normalize(rng.standard_normal(provider.dim))


# One in-flight cap per endpoint, shared by all configs pointing at it.
_semaphores: dict[tuple[str, int], threading.BoundedSemaphore] = {}
_semaphores_lock = threading.Lock()


def _endpoint_semaphore(provider: ProviderConfig) -> threading.BoundedSemaphore:
    key = (provider.endpoint or "", provider.max_in_flight)
    with _semaphores_lock:
        sem = _semaphores.get(key)
        if sem is None:
            sem = threading.BoundedSemaphore(provider.max_in_flight)
            _semaphores[key] = sem
        return sem


def _http_post_json(url: str, payload: dict, headers: dict, timeout: float) -> tuple[int, dict]:
    """POST JSON and return (status, parsed body). Patchable in tests."""
    resp = requests.post(url, json=payload, headers=headers, timeout=timeout)
    try:
        body = resp.json()
    except ValueError:
        body = {"raw": resp.text}
    return resp.status_code, body


def _remote_embed(provider: ProviderConfig, inputs: list[str]) -> list[np.ndarray]:
    payload = {"model": provider.model_name, "input": inputs}
    headers = {"Content-Type": "application/json"}
    api_key = os.environ.get(provider.api_key_env, "")
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"

    sem = _endpoint_semaphore(provider)
    last_err: RemoteError | None = None
    for attempt in range(provider.max_retries + 1):
        with sem:
            status, body = _http_post_json(
                provider.endpoint, payload, headers, provider.timeout
            )
        if status == 200:
            try:
                data = body["data"]
                vecs = [np.asarray(item["embedding"], dtype=np.float64) for item in data]
            except (KeyError, TypeError) as exc:
                raise RemoteError(status, f"unexpected body shape: {exc}")
            if len(vecs) != len(inputs):
                raise RemoteError(status, "response count does not match input count")
            return [l2_normalize(v) for v in vecs]
        last_err = RemoteError(status, str(body))
        if not last_err.retryable or attempt == provider.max_retries:
            raise last_err
        delay = provider.backoff_base * (2 ** attempt)
        logger.warning("embedding endpoint returned %d, retrying in %.1fs", status, delay)
        time.sleep(delay)
    raise last_err  # pragma: no cover - loop always raises or returns


def embed_text(provider: ProviderConfig, text: str) -> np.ndarray:
    """Embed one text string into a unit-norm vector of ``provider.dim``."""
    if not text or not text.strip():
        raise EmptyInputError("text is empty after trimming")
    if provider.kind == PROVIDER_DETERMINISTIC:
        return _deterministic_vector(provider, _DOMAIN_TEXT, text.encode("utf-8"))
    return _remote_embed(provider, [text])[0]


def embed_image(provider: ProviderConfig, image_bytes: bytes) -> np.ndarray:
    """Embed one image payload. Bytes pass through untouched (no decoding)."""
    if not image_bytes:
        raise EmptyInputError("image payload is empty")
    if provider.kind == PROVIDER_DETERMINISTIC:
        return _deterministic_vector(provider, _DOMAIN_IMAGE, image_bytes)
    data_url = "data:application/octet-stream;base64," + base64.b64encode(image_bytes).decode(
        "ascii"
    )
    return _remote_embed(provider, [data_url])[0]
