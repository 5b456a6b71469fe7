"""Patient cases: strict JSON schema, generator view, source-record ingestion."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from veripatient.taxonomy import NoiseLevelError, NoisePillar, NoiseProfile, NoiseSpec, sample_profile
from veripatient.umls.context import SemanticContext, normalize_symptom

ICD10_PATTERN = re.compile(r"^[A-Za-z]\d[0-9A-Za-z]*(\.[0-9A-Za-z]+)?$")
MAX_AGE = 120
SEED_MAX = 2**64 - 1


class SchemaError(ValueError):
    """Invalid case document; ``path`` is a JSONPath-style pointer."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class IngestionError(ValueError):
    def __init__(self, source_field: str, message: str):
        super().__init__(f"{source_field}: {message}")
        self.source_field = source_field


class ConflictError(ValueError):
    """Two records in one batch share a patient id."""


@dataclass(frozen=True)
class Demographics:
    age: int
    sex: str
    occupation: str | None = None

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"age": self.age, "sex": self.sex}
        if self.occupation:
            out["occupation"] = self.occupation
        return out


@dataclass(frozen=True)
class PatientCase:
    patient_id: str
    demographics: Demographics
    symptoms: tuple[str, ...]
    diagnosis: str
    icd10_code: str
    seed: int
    noise_profile: NoiseProfile | None = None  # None until assigned
    umls_context: Mapping[str, SemanticContext] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "patient_id": self.patient_id,
            "demographics": self.demographics.to_dict(),
            "symptoms": list(self.symptoms),
            "diagnosis": self.diagnosis,
            "icd10_code": self.icd10_code,
            "seed": self.seed,
            "umls_context": {k: v.to_dict() for k, v in sorted(self.umls_context.items())},
        }
        if self.noise_profile is not None:
            out["noise_profile"] = self.noise_profile.to_list()
        return out

    def context_json(self) -> str:
        return json.dumps(
            {k: v.to_dict() for k, v in self.umls_context.items()},
            sort_keys=True,
            indent=2,
            ensure_ascii=False,
        )

    @property
    def profile(self) -> NoiseProfile:
        if self.noise_profile is None:
            raise ValueError(f"case {self.patient_id} has no noise profile assigned")
        return self.noise_profile


@dataclass(frozen=True)
class GeneratorView:
    """What the patient generator may see. Has no diagnosis, ICD or context fields."""

    demographics: Demographics
    symptoms: tuple[str, ...]
    noise_profile: NoiseProfile
    seed: int

    def to_dict(self) -> dict:
        return {
            "demographics": self.demographics.to_dict(),
            "symptoms": list(self.symptoms),
            "noise_profile": self.noise_profile.to_list(),
            "seed": self.seed,
        }


def generator_view(case: PatientCase) -> GeneratorView:
    return GeneratorView(
        demographics=case.demographics,
        symptoms=case.symptoms,
        noise_profile=case.noise_profile if case.noise_profile is not None else NoiseProfile(),
        seed=case.seed,
    )


# --- strict parsing ---------------------------------------------------------

_CASE_FIELDS = {
    "patient_id", "demographics", "symptoms", "diagnosis",
    "icd10_code", "noise_profile", "umls_context", "seed",
}
_REQUIRED_CASE_FIELDS = ("patient_id", "demographics", "symptoms", "diagnosis", "icd10_code", "seed")
_DEMOGRAPHIC_FIELDS = {"age", "sex", "occupation"}


def _expect(value: Any, kind: type | tuple[type, ...], path: str) -> Any:
    if isinstance(value, bool) and kind is not bool:
        raise SchemaError(path, f"expected {_kind_name(kind)}, got bool")
    if not isinstance(value, kind):
        raise SchemaError(path, f"expected {_kind_name(kind)}, got {type(value).__name__}")
    return value


def _kind_name(kind: type | tuple[type, ...]) -> str:
    if isinstance(kind, tuple):
        return " or ".join(k.__name__ for k in kind)
    return kind.__name__


def _closed(obj: dict, allowed: set[str], required: Iterable[str], path: str) -> None:
    for key in sorted(set(obj) - allowed):
        raise SchemaError(f"{path}.{key}", "unknown field")
    for key in required:
        if key not in obj:
            raise SchemaError(f"{path}.{key}", "missing required field")


def _nonempty_str(value: Any, path: str) -> str:
    _expect(value, str, path)
    if not value.strip():
        raise SchemaError(path, "must be non-empty")
    return value


def _parse_demographics(obj: Any, path: str) -> Demographics:
    _expect(obj, dict, path)
    _closed(obj, _DEMOGRAPHIC_FIELDS, ("age", "sex"), path)
    age = _expect(obj["age"], int, f"{path}.age")
    if not 0 <= age <= MAX_AGE:
        raise SchemaError(f"{path}.age", f"age {age} outside 0..{MAX_AGE}")
    sex = _nonempty_str(obj["sex"], f"{path}.sex")
    occupation = obj.get("occupation")
    if occupation is not None:
        _expect(occupation, str, f"{path}.occupation")
        occupation = occupation or None
    return Demographics(age=age, sex=sex, occupation=occupation)


def _parse_profile(items: Any, path: str) -> NoiseProfile:
    _expect(items, list, path)
    specs = []
    for i, item in enumerate(items):
        p = f"{path}[{i}]"
        _expect(item, dict, p)
        _closed(item, {"type", "level"}, ("type", "level"), p)
        try:
            pillar = NoisePillar(item["type"])
        except ValueError:
            raise SchemaError(f"{p}.type", f"unknown noise pillar {item['type']!r}") from None
        level = _expect(item["level"], int, f"{p}.level")
        try:
            specs.append(NoiseSpec(pillar, level))
        except NoiseLevelError as exc:
            raise SchemaError(f"{p}.level", str(exc)) from None
    if len({s.pillar for s in specs}) != len(specs):
        raise SchemaError(path, "duplicate noise pillar")
    return NoiseProfile(tuple(specs))


def _key_matches_symptom(key: str, symptom_keys: Iterable[str]) -> bool:
    # A context key may name the head of a longer symptom phrase
    # ("chest_pain" for "Chest pain radiating to left arm").
    padded = f"_{key}_"
    return any(k == key or padded in f"_{k}_" for k in symptom_keys)


def _parse_context(obj: Any, symptoms: tuple[str, ...], path: str) -> dict[str, SemanticContext]:
    _expect(obj, dict, path)
    symptom_keys = [normalize_symptom(s) for s in symptoms]
    out = {}
    for key, value in obj.items():
        p = f"{path}.{key}"
        if key != normalize_symptom(key) or not _key_matches_symptom(key, symptom_keys):
            raise SchemaError(p, "context key does not correspond to any listed symptom")
        _expect(value, dict, p)
        for cat, items in value.items():
            _expect(items, list, f"{p}.{cat}")
            for j, item in enumerate(items):
                _expect(item, str, f"{p}.{cat}[{j}]")
        try:
            out[key] = SemanticContext.from_dict(value)
        except ValueError as exc:
            raise SchemaError(p, str(exc)) from None
    return out


def parse_case(obj: Any, path: str = "$") -> PatientCase:
    _expect(obj, dict, path)
    _closed(obj, _CASE_FIELDS, _REQUIRED_CASE_FIELDS, path)
    patient_id = _nonempty_str(obj["patient_id"], f"{path}.patient_id")
    demographics = _parse_demographics(obj["demographics"], f"{path}.demographics")

    symptoms_raw = _expect(obj["symptoms"], list, f"{path}.symptoms")
    if not symptoms_raw:
        raise SchemaError(f"{path}.symptoms", "must list at least one symptom")
    symptoms = tuple(_nonempty_str(s, f"{path}.symptoms[{i}]") for i, s in enumerate(symptoms_raw))

    diagnosis = _nonempty_str(obj["diagnosis"], f"{path}.diagnosis")
    icd = _nonempty_str(obj["icd10_code"], f"{path}.icd10_code")
    if not ICD10_PATTERN.match(icd):
        raise SchemaError(f"{path}.icd10_code", f"malformed ICD-10 code {icd!r}")

    seed = _expect(obj["seed"], int, f"{path}.seed")
    if not 0 <= seed <= SEED_MAX:
        raise SchemaError(f"{path}.seed", "seed must fit in 64 bits")

    profile = None
    if obj.get("noise_profile") is not None:
        profile = _parse_profile(obj["noise_profile"], f"{path}.noise_profile")
    context = _parse_context(obj.get("umls_context", {}), symptoms, f"{path}.umls_context")

    return PatientCase(
        patient_id=patient_id,
        demographics=demographics,
        symptoms=symptoms,
        diagnosis=diagnosis,
        icd10_code=icd,
        seed=seed,
        noise_profile=profile,
        umls_context=context,
    )


def load_case(document: str) -> PatientCase:
    try:
        obj = json.loads(document)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc}") from None
    return parse_case(obj)


def dump_case(case: PatientCase) -> str:
    return json.dumps(case.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def load_corpus(path: str | Path) -> list[PatientCase]:
    """Load every case under ``path`` (a file or a directory of ``*.json``).

    Each file holds one case object or an array of them. Files are read in
    sorted order and ids must be unique across the whole corpus.
    """
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    cases: list[PatientCase] = []
    for f in files:
        obj = json.loads(f.read_text(encoding="utf-8"))
        if isinstance(obj, list):
            cases.extend(parse_case(item, f"{f.name}$[{i}]") for i, item in enumerate(obj))
        else:
            cases.append(parse_case(obj, f"{f.name}$"))
    check_unique(cases)
    return cases


def check_unique(cases: Iterable[PatientCase]) -> None:
    seen: set[str] = set()
    for case in cases:
        if case.patient_id in seen:
            raise ConflictError(f"duplicate patient_id {case.patient_id!r}")
        seen.add(case.patient_id)


def corpus_fingerprint(cases: Iterable[PatientCase]) -> str:
    blob = json.dumps([c.to_dict() for c in cases], sort_keys=True, ensure_ascii=False)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def assign_profile(case: PatientCase) -> PatientCase:
    """Give an ingested case its protocol noise profile, drawn from its seed."""
    return replace(case, noise_profile=sample_profile(case.seed))


# --- ingestion adapters -----------------------------------------------------

def derive_seed(patient_id: str) -> int:
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def _require(record: Mapping, name: str) -> Any:
    value = record.get(name)
    if value is None or value == "" or value == []:
        raise IngestionError(name, "missing required source field")
    return value


def _ddxplus(record: Mapping) -> PatientCase:
    """DDXPlus-shaped export: ``{id, age, sex, pathology, icd10, evidences[]}``."""
    patient_id = str(record.get("patient_id") or _require(record, "id"))
    evidences = _require(record, "evidences")
    if not isinstance(evidences, list):
        raise IngestionError("evidences", "expected a list of symptom texts")
    symptoms = [e["text"] if isinstance(e, Mapping) else e for e in evidences]
    return _build(
        patient_id,
        age=_require(record, "age"),
        sex=_require(record, "sex"),
        symptoms=symptoms,
        diagnosis=_require(record, "pathology"),
        icd10=_require(record, "icd10"),
        source_fields=("age", "sex", "evidences", "pathology", "icd10"),
    )


def _triage(record: Mapping) -> PatientCase:
    """ED-triage export: ``{stay_id, age, gender, chiefcomplaint, icd_code, icd_title}``."""
    patient_id = str(record.get("patient_id") or _require(record, "stay_id"))
    complaint = _require(record, "chiefcomplaint")
    if isinstance(complaint, str):
        symptoms = [s.strip() for s in complaint.split(",") if s.strip()]
    else:
        symptoms = list(complaint)
    return _build(
        patient_id,
        age=_require(record, "age"),
        sex=_require(record, "gender"),
        symptoms=symptoms,
        diagnosis=_require(record, "icd_title"),
        icd10=_require(record, "icd_code"),
        source_fields=("age", "gender", "chiefcomplaint", "icd_title", "icd_code"),
    )


def _build(patient_id: str, *, age, sex, symptoms, diagnosis, icd10, source_fields) -> PatientCase:
    doc = {
        "patient_id": patient_id,
        "demographics": {"age": age, "sex": sex},
        "symptoms": symptoms,
        "diagnosis": diagnosis,
        "icd10_code": icd10,
        "seed": derive_seed(patient_id),
    }
    field_map = dict(zip(("age", "sex", "symptoms", "diagnosis", "icd10_code"), source_fields))
    try:
        return parse_case(doc)
    except SchemaError as exc:
        leaf = exc.path.split(".")[-1].split("[")[0]
        raise IngestionError(field_map.get(leaf, leaf), exc.message) from None


ADAPTERS: dict[str, Callable[[Mapping], PatientCase]] = {
    "ddxplus": _ddxplus,
    "triage": _triage,
}


def ingest_record(source_record: Mapping, adapter_id: str) -> PatientCase:
    try:
        adapter = ADAPTERS[adapter_id]
    except KeyError:
        raise ValueError(f"unknown adapter {adapter_id!r}; known: {sorted(ADAPTERS)}") from None
    return adapter(source_record)


def ingest_batch(records: Iterable[Mapping], adapter_id: str) -> list[PatientCase]:
    cases = [ingest_record(r, adapter_id) for r in records]
    check_unique(cases)
    return cases
