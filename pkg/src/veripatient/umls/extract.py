"""Offline context extraction and the on-disk per-symptom cache."""

from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import TYPE_CHECKING, Collection, Iterable

from veripatient.umls.client import TerminologyClient, TerminologyError
from veripatient.umls.context import (
    RELATION_LIMIT,
    SYNONYM_LIMIT,
    VARIATION_LIMIT,
    ConceptRef,
    SemanticContext,
    classify_relation,
    dedup,
    normalize_symptom,
)

if TYPE_CHECKING:
    from veripatient.cases import PatientCase

logger = logging.getLogger(__name__)

META_KEY = "__meta__"
SNOMED_SOURCE = "SNOMEDCT_US"


class ConceptNotFound(TerminologyError):
    def __init__(self, symptom: str):
        super().__init__(f"no concept found for symptom {symptom!r}")
        self.symptom = symptom


class CacheBuildError(RuntimeError):
    """One or more symptoms failed to extract; ``failures`` lists them all."""

    def __init__(self, failures: list[tuple[str, list[str], str]]):
        lines = [f"{key} (cases {', '.join(ids)}): {msg}" for key, ids, msg in failures]
        super().__init__("context extraction failed for:\n  " + "\n  ".join(lines))
        self.failures = failures


def _snomed_id(atoms: Iterable[dict]) -> str | None:
    for atom in atoms:
        if atom.get("rootSource") == SNOMED_SOURCE and atom.get("code"):
            return str(atom["code"]).rstrip("/").rsplit("/", 1)[-1]
    return None


def resolve_concept(symptom: str, client: TerminologyClient) -> ConceptRef:
    hits = client.search(symptom, "exact") or client.search(symptom, "words")
    if not hits:
        raise ConceptNotFound(symptom)
    return ConceptRef(cui=hits[0]["ui"], preferred_name=hits[0].get("name", symptom))


def extract_context(
    symptom: str,
    client: TerminologyClient,
    relation_labels: Collection[str] | None = None,
) -> SemanticContext:
    """Build the semantic context for one symptom term.

    Steps: resolve the CUI, collect English atoms as synonyms, collect
    word-search neighbours as variations, then walk SNOMED CT relations and
    bucket each related name. Lists are capped in service order before being
    sorted for storage.

    Args:
        symptom: Free-text symptom as it appears in a case.
        client: Any terminology client (live, replay, recording).
        relation_labels: If given, only relations whose ``relationLabel`` is
            in this set are traversed. Default is all source-asserted ones.
    """
    concept = resolve_concept(symptom, client)

    atoms = [a for a in client.atoms(concept.cui) if a.get("language", "ENG") == "ENG"]
    synonyms = dedup(a.get("name", "") for a in atoms)[:SYNONYM_LIMIT]
    snomed = _snomed_id(atoms)
    concept = replace(concept, snomed_id=snomed)

    neighbours = [r for r in client.search(symptom, "words") if r["ui"] != concept.cui]
    variations = dedup(r.get("name", "") for r in neighbours)[:VARIATION_LIMIT]

    buckets: dict[str, list[str]] = {"association": [], "location": [], "modifier": []}
    if snomed is not None:
        relations = [
            r for r in client.relations(snomed)
            if relation_labels is None or r.get("relationLabel") in relation_labels
        ]
        names = dedup(r.get("relatedIdName", "") for r in relations)[:RELATION_LIMIT]
        for name in names:
            buckets[classify_relation(name)].append(name)
    else:
        logger.warning("no SNOMED CT atom for %s (%s); skipping relations", symptom, concept.cui)

    return SemanticContext(
        synonyms=tuple(synonyms),
        variations=tuple(variations),
        associations=tuple(buckets["association"]),
        locations=tuple(buckets["location"]),
        modifiers=tuple(buckets["modifier"]),
        concept=concept,
    )


@dataclass
class ContextCache:
    entries: dict[str, SemanticContext] = field(default_factory=dict)
    source_meta: dict[str, str] = field(default_factory=dict)
    timings: dict[str, float] = field(default_factory=dict, compare=False, repr=False)

    def to_json(self) -> str:
        doc: dict = {k: v.to_dict() for k, v in self.entries.items()}
        doc[META_KEY] = dict(self.source_meta)
        return json.dumps(doc, sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ContextCache:
        doc = json.loads(text)
        meta = doc.pop(META_KEY, {})
        entries = {}
        for key, value in doc.items():
            if key != normalize_symptom(key):
                raise ValueError(f"cache key {key!r} is not a normalized symptom")
            entries[key] = SemanticContext.from_dict(value)
        return cls(entries=entries, source_meta=meta)

    def write(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_bytes(self.to_json().encode("utf-8"))
        tmp.replace(path)

    @classmethod
    def read(cls, path: str | Path) -> ContextCache:
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def context_for(self, case: PatientCase) -> dict[str, SemanticContext]:
        out = {}
        for symptom in case.symptoms:
            key = normalize_symptom(symptom)
            if key not in self.entries:
                raise KeyError(f"cache has no entry for {key!r} (case {case.patient_id})")
            out[key] = self.entries[key]
        return out

    def attach(self, case: PatientCase) -> PatientCase:
        return replace(case, umls_context=self.context_for(case))


def build_cache(
    corpus: Iterable[PatientCase],
    client: TerminologyClient,
    width: int = 4,
    relation_labels: Collection[str] | None = None,
) -> ContextCache:
    """Extract context once per unique normalized symptom across ``corpus``.

    Extraction fans out across ``width`` threads; the result does not depend
    on completion order. Any failure fails the whole build, after every
    symptom has been attempted, so the error lists all of them.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus: nothing to preprocess")

    owners: dict[str, list[str]] = {}
    for case in corpus:
        for symptom in case.symptoms:
            ids = owners.setdefault(normalize_symptom(symptom), [])
            if case.patient_id not in ids:
                ids.append(case.patient_id)
    keys = sorted(owners)

    def work(key: str) -> tuple[str, SemanticContext | Exception, float]:
        start = time.perf_counter()
        try:
            ctx: SemanticContext | Exception = extract_context(
                key.replace("_", " "), client, relation_labels
            )
        except TerminologyError as exc:
            ctx = exc
        return key, ctx, time.perf_counter() - start

    with ThreadPoolExecutor(max_workers=max(1, width)) as pool:
        results = list(pool.map(work, keys))

    failures = [(k, owners[k], str(r)) for k, r, _ in results if isinstance(r, Exception)]
    if failures:
        raise CacheBuildError(failures)

    extracted_at = client.recorded_at or datetime.now(timezone.utc).replace(microsecond=0).isoformat()
    return ContextCache(
        entries={k: r for k, r, _ in results},  # type: ignore[misc]
        source_meta={"extracted_at": extracted_at, "snapshot_id": client.snapshot_id},
        timings={k: t for k, _, t in results},
    )
