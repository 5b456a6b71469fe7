"""Terminology-grounded semantic context for ground-truth symptoms."""

from veripatient.umls.client import (
    API_KEY_ENV,
    CountingClient,
    FixtureMissing,
    LiveClient,
    RecordingClient,
    ReplayClient,
    TerminologyClient,
    TerminologyError,
    TransportError,
)
from veripatient.umls.context import (
    RELATION_LIMIT,
    SYNONYM_LIMIT,
    VARIATION_LIMIT,
    ConceptRef,
    SemanticContext,
    classify_relation,
    normalize_symptom,
)
from veripatient.umls.extract import (
    CacheBuildError,
    ConceptNotFound,
    ContextCache,
    build_cache,
    extract_context,
)

__all__ = [
    "API_KEY_ENV",
    "CacheBuildError",
    "ConceptNotFound",
    "ConceptRef",
    "ContextCache",
    "CountingClient",
    "FixtureMissing",
    "LiveClient",
    "RELATION_LIMIT",
    "RecordingClient",
    "ReplayClient",
    "SYNONYM_LIMIT",
    "SemanticContext",
    "TerminologyClient",
    "TerminologyError",
    "TransportError",
    "VARIATION_LIMIT",
    "build_cache",
    "classify_relation",
    "extract_context",
    "normalize_symptom",
]
