"""Exception types shared across the engine.

Errors are grouped by the subsystem that raises them; everything derives
from RagloopError so callers can catch engine failures in one clause.
"""

from __future__ import annotations


class RagloopError(Exception):
    """Base class for all engine errors."""


# --- embedding providers ---

class ZeroVectorError(RagloopError):
    """All components of an embedding are zero; it cannot be normalized or indexed."""


class EmptyInputError(RagloopError):
    """Text was empty after trimming, or an image payload had no bytes."""


class RemoteError(RagloopError):
    """A remote provider call failed with an HTTP error."""

    def __init__(self, status: int, body: str = ""):
        super().__init__(f"remote call failed with status {status}: {body[:200]}")
        self.status = status
        self.body = body

    @property
    def retryable(self) -> bool:
        return self.status == 429 or 500 <= self.status < 600


# --- knowledge-base store ---

class EmptyCorpusError(RagloopError):
    """A KB build received no entries."""


class EmbeddingError(RagloopError):
    """Embedding a corpus entry failed; carries the offending doc_id."""

    def __init__(self, doc_id: str, cause: Exception | None = None):
        super().__init__(f"embedding failed for doc {doc_id!r}: {cause}")
        self.doc_id = doc_id
        self.cause = cause


class ImageReadError(RagloopError):
    """An entry's image could not be read at build time."""

    def __init__(self, doc_id: str, ref: str, cause: Exception | None = None):
        super().__init__(f"cannot read image {ref!r} for doc {doc_id!r}: {cause}")
        self.doc_id = doc_id
        self.ref = ref


class CorruptBundleError(RagloopError):
    """A KB bundle on disk is incomplete or fails integrity checks."""


class FingerprintMismatchError(RagloopError):
    """A KB bundle was built under a different provider configuration."""

    def __init__(self, expected: str, found: str):
        super().__init__(
            f"KB provider fingerprint {found!r} does not match configured {expected!r}"
        )
        self.expected = expected
        self.found = found


# --- search ---

class DimensionMismatchError(RagloopError):
    """Query vector dimension does not match the index dimension."""


# --- chat client ---

class ChatTimeoutError(RagloopError):
    """A chat call exceeded its timeout after exhausting retries."""


class RateLimitedError(RagloopError):
    """The chat service kept rate-limiting past the retry budget."""


class MalformedResponseError(RagloopError):
    """The chat service returned a body the client cannot interpret."""


class ScriptMissError(RagloopError):
    """Scripted mode has no response for the requested key."""

    def __init__(self, kind: str, sample_id: str, iteration: int):
        super().__init__(
            f"no scripted response for kind={kind!r} sample={sample_id!r} iteration={iteration}"
        )
        self.key = (kind, sample_id, iteration)


class MissingSlotError(RagloopError):
    """A prompt template slot was not supplied."""

    def __init__(self, name: str):
        super().__init__(f"missing prompt slot {name!r}")
        self.name = name


class ParseFailureError(RagloopError):
    """A generated sub-query response yielded fewer than two questions."""


# --- ingestion ---

class SchemaError(RagloopError):
    """A benchmark line failed validation."""

    def __init__(self, line_no: int, field: str, message: str = ""):
        detail = f": {message}" if message else ""
        super().__init__(f"line {line_no}: invalid field {field!r}{detail}")
        self.line_no = line_no
        self.field = field


class DuplicateIdError(RagloopError):
    """A sample_id occurred more than once in a benchmark file."""

    def __init__(self, sample_id: str, line_no: int):
        super().__init__(f"duplicate sample_id {sample_id!r} at line {line_no}")
        self.sample_id = sample_id
        self.line_no = line_no


class MissingImageError(RagloopError):
    """A sample's image reference did not resolve."""


# --- evaluation ---

class UnknownDocIdError(RagloopError):
    """A hit references a doc_id absent from the KB metadata."""

    def __init__(self, doc_id: str):
        super().__init__(f"doc_id {doc_id!r} not present in KB metadata")
        self.doc_id = doc_id


class GoldMismatchError(RagloopError):
    """A run result's sample_id has no gold data."""

    def __init__(self, sample_id: str):
        super().__init__(f"no gold data for sample {sample_id!r}")
        self.sample_id = sample_id


# --- configuration ---

class ConfigError(RagloopError):
    """A config file or CLI flag combination is invalid (usage-class error)."""
