"""Per-symptom semantic context and the pure helpers that shape it."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable

SYNONYM_LIMIT = 50
VARIATION_LIMIT = 25
RELATION_LIMIT = 100

CATEGORIES = ("synonyms", "variations", "associations", "locations", "modifiers")

_SEPARATORS = re.compile(r"[\s_]+")
_NON_WORD = re.compile(r"[^\w\s]|_", re.UNICODE)


def normalize_symptom(text: str) -> str:
    """Cache key for a symptom: ``"  Chest Pain " -> "chest_pain"``."""
    words = [
        _NON_WORD.sub("", w) for w in _SEPARATORS.split(text.lower()) if w
    ]
    words = [w for w in words if w]
    if not words:
        raise ValueError(f"cannot normalize empty symptom {text!r}")
    return "_".join(words)


def clean_term(text: str) -> str:
    return " ".join(text.lower().split())


def dedup(items: Iterable[str]) -> list[str]:
    """Clean and de-duplicate, keeping first-seen order."""
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        term = clean_term(item)
        if term and term not in seen:
            seen.add(term)
            out.append(term)
    return out


# Checked in this order; first hit wins, anything else is a modifier.
ASSOCIATION_MARKERS = ("accompanied by", "associated with")
ASSOCIATION_PREFIXES = ("with ",)
LOCATION_MARKERS = (
    "radiating",
    "left-sided",
    "right-sided",
    "bilateral",
    "unilateral",
    "below",
    "above",
    "between",
    "behind",
    "deep in",
    "located in",
    "zygomatic",
    "substernal",
    "retrosternal",
    "clavicle",
    "cheekbone",
    "shoulder blade",
)


def classify_relation(relation_text: str) -> str:
    """Bucket a SNOMED relation label as association, location or modifier.

    >>> classify_relation("headache associated with nausea")
    'association'
    >>> classify_relation("chest pain radiating to left arm")
    'location'
    >>> classify_relation("chest pain made worse by coughing")
    'modifier'
    """
    label = clean_term(relation_text)
    if not label:
        raise ValueError("empty relation label")
    if any(m in label for m in ASSOCIATION_MARKERS) or label.startswith(ASSOCIATION_PREFIXES):
        return "association"
    if any(m in label for m in LOCATION_MARKERS):
        return "location"
    return "modifier"


@dataclass(frozen=True)
class ConceptRef:
    cui: str
    preferred_name: str
    snomed_id: str | None = None

    def __post_init__(self) -> None:
        if not self.cui:
            raise ValueError("ConceptRef.cui must be non-empty")


@dataclass(frozen=True)
class SemanticContext:
    """Five attribute lists for one symptom, stored deduplicated and sorted."""

    synonyms: tuple[str, ...] = ()
    variations: tuple[str, ...] = ()
    associations: tuple[str, ...] = ()
    locations: tuple[str, ...] = ()
    modifiers: tuple[str, ...] = ()
    concept: ConceptRef | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for name in CATEGORIES:
            object.__setattr__(self, name, tuple(sorted(dedup(getattr(self, name)))))
        if len(self.synonyms) > SYNONYM_LIMIT:
            raise ValueError(f"{len(self.synonyms)} synonyms exceeds cap {SYNONYM_LIMIT}")
        if len(self.variations) > VARIATION_LIMIT:
            raise ValueError(f"{len(self.variations)} variations exceeds cap {VARIATION_LIMIT}")
        n_rel = len(self.associations) + len(self.locations) + len(self.modifiers)
        if n_rel > RELATION_LIMIT:
            raise ValueError(f"{n_rel} relation-derived items exceeds cap {RELATION_LIMIT}")

    def to_dict(self) -> dict[str, list[str]]:
        return {name: list(getattr(self, name)) for name in CATEGORIES}

    @classmethod
    def from_dict(cls, data: dict) -> SemanticContext:
        unknown = set(data) - set(CATEGORIES)
        if unknown:
            raise ValueError(f"unknown context categories: {sorted(unknown)}")
        return cls(**{name: tuple(data.get(name, ())) for name in CATEGORIES})

    def is_empty(self) -> bool:
        return not any(getattr(self, name) for name in CATEGORIES)
