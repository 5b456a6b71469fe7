"""Doctor-patient conversations, transcripts, and reproducible batches."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import product
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from veripatient.cases import PatientCase, assign_profile, load_corpus
from veripatient.engine import ConversationState, EngineConfig, Mode, Verdict, respond
from veripatient.evaluation.matching import match_diagnosis
from veripatient.llm import (
    Backend,
    ChatMessage,
    EndpointConfig,
    Gateway,
    LLMError,
    Role,
    render_template,
)
from veripatient.taxonomy import NoiseProfile
from veripatient.umls.extract import ContextCache

logger = logging.getLogger(__name__)

MAX_TURNS = 40
FORCED_DIAGNOSIS = "You must now provide your Final Diagnosis."
DOCTOR_NUDGE = "Reply with exactly one question for the patient, or give your Final Diagnosis."
CONDITIONS = ("clean", "noisy")

_MARKER = re.compile(r"final\s+diagnosis\s*:", re.IGNORECASE)


def extract_final_diagnosis(doctor_text: str) -> str | None:
    """Text after the first ``Final Diagnosis:`` marker, up to end of line."""
    match = _MARKER.search(doctor_text)
    if match is None:
        return None
    rest = doctor_text[match.end():].split("\n", 1)[0]
    label = rest.strip().strip("*").strip()
    return label or None


# --- records ------------------------------------------------------------------

@dataclass(frozen=True)
class TurnRecord:
    """One doctor message and the patient's reply.

    The final-diagnosis turn has no patient reply (``patient_text`` is None).
    """

    index: int
    doctor_text: str
    patient_text: str | None
    attempts: int = 0
    verdicts: tuple[Verdict, ...] = ()
    fallback_used: bool = False
    verifier_calls: int = 0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "doctor_text": self.doctor_text,
            "patient_text": self.patient_text,
            "attempts": self.attempts,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "fallback_used": self.fallback_used,
            "verifier_calls": self.verifier_calls,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> TurnRecord:
        return cls(
            index=d["index"],
            doctor_text=d["doctor_text"],
            patient_text=d["patient_text"],
            attempts=d["attempts"],
            verdicts=tuple(Verdict.from_dict(v) for v in d["verdicts"]),
            fallback_used=d["fallback_used"],
            verifier_calls=d["verifier_calls"],
        )


@dataclass(frozen=True)
class Transcript:
    case_id: str
    doctor_id: str
    mode: str
    condition: str
    noise_profile: tuple[dict, ...]
    gold_diagnosis: str
    gold_icd10: str
    turns: tuple[TurnRecord, ...]
    terminated: str  # diagnosis | turn_cap | error
    run_seed: int
    final_diagnosis: str | None = None
    correct: bool = False
    forced_response: str | None = None
    error: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        if len(self.turns) > MAX_TURNS:
            raise ValueError(f"transcript has {len(self.turns)} turns, cap is {MAX_TURNS}")
        if self.terminated not in ("diagnosis", "turn_cap", "error"):
            raise ValueError(f"bad termination {self.terminated!r}")
        if self.terminated == "diagnosis" and not self.final_diagnosis:
            raise ValueError("terminated=diagnosis needs a final diagnosis")

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    @property
    def verifier_calls(self) -> int:
        return sum(t.verifier_calls for t in self.turns)

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "doctor_id": self.doctor_id,
            "mode": self.mode,
            "condition": self.condition,
            "noise_profile": list(self.noise_profile),
            "gold_diagnosis": self.gold_diagnosis,
            "gold_icd10": self.gold_icd10,
            "turns": [t.to_dict() for t in self.turns],
            "terminated": self.terminated,
            "run_seed": self.run_seed,
            "final_diagnosis": self.final_diagnosis,
            "correct": self.correct,
            "forced_response": self.forced_response,
            "error": dict(self.error) if self.error else None,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> Transcript:
        return cls(
            case_id=d["case_id"],
            doctor_id=d["doctor_id"],
            mode=d["mode"],
            condition=d["condition"],
            noise_profile=tuple(d["noise_profile"]),
            gold_diagnosis=d["gold_diagnosis"],
            gold_icd10=d["gold_icd10"],
            turns=tuple(TurnRecord.from_dict(t) for t in d["turns"]),
            terminated=d["terminated"],
            run_seed=d["run_seed"],
            final_diagnosis=d.get("final_diagnosis"),
            correct=bool(d.get("correct", False)),
            forced_response=d.get("forced_response"),
            error=d.get("error"),
        )

    @classmethod
    def read(cls, path: str | Path) -> Transcript:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def transcript_filename(case_id: str, doctor_id: str, mode: Mode | str, condition: str = "noisy") -> str:
    mode = Mode.parse(mode).value
    suffix = "__clean" if condition == "clean" else ""
    return f"{case_id}__{doctor_id}__{mode}{suffix}.json"


# --- one conversation -----------------------------------------------------------

def format_history(history: Iterable[tuple[str, str]]) -> str:
    lines = []
    for doctor, patient in history:
        lines.append(f"Doctor: {doctor}")
        lines.append(f"Patient: {patient}")
    return "\n".join(lines) or "(The interview is just starting.)"


def doctor_messages(history: Iterable[tuple[str, str]], forced: bool = False) -> list[ChatMessage]:
    system = render_template("doctor", {"conversation_history": format_history(history)})
    return [
        ChatMessage("system", system),
        ChatMessage("user", FORCED_DIAGNOSIS if forced else DOCTOR_NUDGE),
    ]


def condition_of(case: PatientCase) -> str:
    return "clean" if case.noise_profile is not None and case.noise_profile.is_clean else "noisy"


def run_conversation(
    case: PatientCase,
    gateway: Gateway,
    config: EngineConfig = EngineConfig(),
    *,
    doctor_id: str = "doctor",
    max_turns: int = MAX_TURNS,
    run_seed: int = 0,
) -> Transcript:
    """Alternate doctor questions and patient replies until a diagnosis or the cap.

    The doctor backend is ``gateway``'s DOCTOR role. If the cap is reached the
    doctor gets one forced-diagnosis instruction; its answer is recorded but
    does not count as a turn. A failing backend ends the conversation with
    ``terminated="error"`` rather than raising.
    """
    if not 1 <= max_turns <= MAX_TURNS:
        raise ValueError(f"max_turns must be in 1..{MAX_TURNS}")
    if case.noise_profile is None:
        case = assign_profile(case)
    state = ConversationState(case)
    turns: list[TurnRecord] = []

    def finish(terminated: str, final: str | None = None, forced: str | None = None,
               error: dict | None = None) -> Transcript:
        return Transcript(
            case_id=case.patient_id,
            doctor_id=doctor_id,
            mode=config.mode.value,
            condition=condition_of(case),
            noise_profile=tuple(case.noise_profile.to_list()),
            gold_diagnosis=case.diagnosis,
            gold_icd10=case.icd10_code,
            turns=tuple(turns),
            terminated=terminated,
            run_seed=run_seed,
            final_diagnosis=final,
            correct=match_diagnosis(final, case.diagnosis, case.icd10_code),
            forced_response=forced,
            error=error,
        )

    for index in range(1, max_turns + 1):
        try:
            doctor_text = gateway.complete(Role.DOCTOR, doctor_messages(state.history)).strip()
            if not doctor_text:
                raise LLMError("doctor returned an empty message")
            diagnosis = extract_final_diagnosis(doctor_text)
            if diagnosis is not None:
                turns.append(TurnRecord(index, doctor_text, None))
                return finish("diagnosis", diagnosis)
            turn = respond(doctor_text, state, config, gateway)
        except LLMError as exc:
            logger.warning("case %s / %s failed at turn %d: %s", case.patient_id, doctor_id, index, exc)
            return finish("error", error={"turn_index": index, "message": str(exc)})
        turns.append(TurnRecord(
            index, doctor_text, turn.text, turn.attempts, turn.verdicts,
            turn.fallback_used, turn.verifier_calls,
        ))
        state.history.append((doctor_text, turn.text))

    try:
        forced = gateway.complete(Role.DOCTOR, doctor_messages(state.history, forced=True)).strip()
    except LLMError as exc:
        return finish("error", error={"turn_index": max_turns + 1, "message": str(exc)})
    return finish("turn_cap", extract_final_diagnosis(forced), forced)


def run_chat(
    case: PatientCase,
    gateway: Gateway,
    config: EngineConfig = EngineConfig(),
    *,
    read_line: Callable[[str], str] = input,
    write: Callable[[str], None] = print,
    max_turns: int = MAX_TURNS,
) -> Transcript:
    """Interactive interview: a human types the doctor's side.

    ``/diagnose <condition>`` ends the session. End of input saves the
    session as turn-capped. Blank lines are ignored.
    """
    if case.noise_profile is None:
        case = assign_profile(case)
    state = ConversationState(case)
    turns: list[TurnRecord] = []
    final: str | None = None
    terminated = "turn_cap"
    while len(turns) < max_turns:
        try:
            line = read_line("Doctor> ")
        except EOFError:
            break
        line = line.strip()
        if not line:
            continue
        if line.lower().startswith("/diagnose"):
            label = line[len("/diagnose"):].strip()
            if not label:
                write("usage: /diagnose <condition>")
                continue
            turns.append(TurnRecord(len(turns) + 1, f"Final Diagnosis: {label}", None))
            final, terminated = label, "diagnosis"
            break
        turn = respond(line, state, config, gateway)
        write(f"Patient> {turn.text}")
        turns.append(TurnRecord(
            len(turns) + 1, line, turn.text, turn.attempts, turn.verdicts,
            turn.fallback_used, turn.verifier_calls,
        ))
        state.history.append((line, turn.text))

    return Transcript(
        case_id=case.patient_id,
        doctor_id="human",
        mode=config.mode.value,
        condition=condition_of(case),
        noise_profile=tuple(case.noise_profile.to_list()),
        gold_diagnosis=case.diagnosis,
        gold_icd10=case.icd10_code,
        turns=tuple(turns),
        terminated=terminated,
        run_seed=case.seed,
        final_diagnosis=final,
        correct=match_diagnosis(final, case.diagnosis, case.icd10_code),
    )


# --- batches ------------------------------------------------------------------

class ConfigError(ValueError):
    pass


class OutputCollision(RuntimeError):
    pass


_RUN_FIELDS = {
    "corpus", "cache", "output", "seed", "width", "modes", "conditions",
    "max_attempts", "max_turns", "endpoints", "doctors", "retries", "backoff", "audit_log",
}


@dataclass(frozen=True)
class RunConfig:
    corpus: Path
    output: Path
    doctors: Mapping[str, EndpointConfig]
    endpoints: Mapping[Role, EndpointConfig]
    cache: Path | None = None
    seed: int = 0
    width: int = 1
    modes: tuple[Mode, ...] = (Mode.HYBRID,)
    conditions: tuple[str, ...] = ("noisy",)
    max_attempts: int = 2
    max_turns: int = MAX_TURNS
    retries: int = 2
    backoff: float = 0.5
    audit_log: Path | None = None

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ConfigError("width must be at least 1")
        if not self.doctors:
            raise ConfigError("at least one doctor endpoint is required")
        if Role.PATIENT_GENERATOR not in self.endpoints:
            raise ConfigError("endpoints.patient_generator is required")
        if any(m is not Mode.NO_CONTROLLER for m in self.modes) and Role.VERIFIER not in self.endpoints:
            raise ConfigError("endpoints.verifier is required for verified modes")
        bad = set(self.conditions) - set(CONDITIONS)
        if bad:
            raise ConfigError(f"unknown conditions {sorted(bad)}")
        if not 1 <= self.max_turns <= MAX_TURNS:
            raise ConfigError(f"max_turns must be in 1..{MAX_TURNS}")
        for doctor_id in self.doctors:
            if "__" in doctor_id or "/" in doctor_id:
                raise ConfigError(f"doctor id {doctor_id!r} may not contain '__' or '/'")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base_dir: Path = Path(".")) -> RunConfig:
        unknown = set(data) - _RUN_FIELDS
        if unknown:
            raise ConfigError(f"unknown run-config fields: {sorted(unknown)}")
        for key in ("corpus", "output", "doctors", "endpoints"):
            if key not in data:
                raise ConfigError(f"run config is missing {key!r}")

        def path(value: str | None) -> Path | None:
            return None if value is None else (base_dir / value)

        try:
            endpoints = {Role(k): EndpointConfig.from_dict(v) for k, v in data["endpoints"].items()}
            doctors = {k: EndpointConfig.from_dict(v) for k, v in data["doctors"].items()}
            modes = tuple(Mode.parse(m) for m in data.get("modes", ["hybrid"]))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return cls(
            corpus=path(data["corpus"]),
            output=path(data["output"]),
            cache=path(data.get("cache")),
            doctors=doctors,
            endpoints=endpoints,
            seed=int(data.get("seed", 0)),
            width=int(data.get("width", 1)),
            modes=modes,
            conditions=tuple(data.get("conditions", ["noisy"])),
            max_attempts=int(data.get("max_attempts", 2)),
            max_turns=int(data.get("max_turns", MAX_TURNS)),
            retries=int(data.get("retries", 2)),
            backoff=float(data.get("backoff", 0.5)),
            audit_log=path(data.get("audit_log")),
        )

    @classmethod
    def read(cls, path: str | Path) -> RunConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read run config {path}: {exc}") from None
        return cls.from_dict(data, path.parent)


@dataclass
class BatchSummary:
    succeeded: list[Path] = field(default_factory=list)
    failed: list[tuple[Path, str]] = field(default_factory=list)
    skipped: list[Path] = field(default_factory=list)

    @property
    def total(self) -> int:
        return len(self.succeeded) + len(self.failed) + len(self.skipped)

    @property
    def partial(self) -> bool:
        return bool(self.failed)


def cell_seed(seed: int, case_id: str, doctor_id: str, mode: Mode, condition: str) -> int:
    key = f"{seed}:{case_id}:{doctor_id}:{mode.value}:{condition}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big") >> 1


def _valid_existing(path: Path) -> bool:
    try:
        return Transcript.read(path).terminated != "error"
    except (OSError, ValueError, KeyError, TypeError):
        return False


def prepare_cases(
    cases: Iterable[PatientCase], cache: ContextCache | None, need_context: bool
) -> list[PatientCase]:
    out = []
    for case in cases:
        if case.noise_profile is None:
            case = assign_profile(case)
        if need_context and not case.umls_context:
            if cache is None:
                raise ConfigError(f"case {case.patient_id} has no context and no cache was given")
            case = cache.attach(case)
        out.append(case)
    return out


def run_batch(
    config: RunConfig,
    *,
    resume: bool = False,
    cases: list[PatientCase] | None = None,
    cache: ContextCache | None = None,
    sleep: Callable[[float], None] | None = None,
) -> BatchSummary:
    """Run every (case, doctor, mode, condition) cell and write one transcript each.

    Transcripts are pure functions of their cell, so any ``width`` gives the
    same files. With ``resume``, cells whose transcript already exists and is
    not an error record are skipped; without it, a non-empty output directory
    is refused.
    """
    if cases is None:
        cases = load_corpus(config.corpus)
    if cache is None and config.cache is not None and config.cache.exists():
        cache = ContextCache.read(config.cache)
    cases = prepare_cases(cases, cache, Mode.HYBRID in config.modes)

    out = config.output
    if out.exists() and any(out.glob("*.json")) and not resume:
        raise OutputCollision(f"{out} already holds transcripts; pass resume to continue")
    out.mkdir(parents=True, exist_ok=True)

    cells = sorted(
        product(cases, sorted(config.doctors), config.modes, config.conditions),
        key=lambda c: (c[0].patient_id, c[1], c[2].value, c[3]),
    )
    shared: dict[int, Backend] = {}

    def backend(endpoint: EndpointConfig, case_id: str, name: str) -> Backend:
        if endpoint.kind == "replay":
            return endpoint.make(case_id, name)
        key = id(endpoint)
        if key not in shared:
            shared[key] = endpoint.make(case_id, name)
        return shared[key]

    # Shared HTTP backends are created up front so worker threads only read the map.
    for ep in [*config.endpoints.values(), *config.doctors.values()]:
        if ep.kind == "http":
            backend(ep, "", ep.model)

    summary = BatchSummary()
    todo = []
    for case, doctor_id, mode, condition in cells:
        path = out / transcript_filename(case.patient_id, doctor_id, mode, condition)
        if resume and path.exists() and _valid_existing(path):
            summary.skipped.append(path)
        else:
            todo.append((case, doctor_id, mode, condition, path))

    def work(cell) -> tuple[Path, Transcript]:
        case, doctor_id, mode, condition, path = cell
        if condition == "clean":
            case = replace(case, noise_profile=NoiseProfile())
        seed = cell_seed(config.seed, case.patient_id, doctor_id, mode, condition)
        backends = {role: backend(ep, case.patient_id, role.value) for role, ep in config.endpoints.items()}
        backends[Role.DOCTOR] = backend(config.doctors[doctor_id], case.patient_id, doctor_id)
        gateway = Gateway(
            backends=backends,
            retries=config.retries,
            backoff=config.backoff,
            seed=seed,
            audit_log=config.audit_log,
            **({"sleep": sleep} if sleep else {}),
        )
        engine = EngineConfig(max_attempts=config.max_attempts, mode=mode)
        try:
            transcript = run_conversation(
                case, gateway, engine, doctor_id=doctor_id, max_turns=config.max_turns, run_seed=seed
            )
        except Exception as exc:  # one bad cell must not sink the batch
            logger.exception("cell %s crashed", path.name)
            transcript = Transcript(
                case_id=case.patient_id, doctor_id=doctor_id, mode=mode.value, condition=condition,
                noise_profile=tuple(case.noise_profile.to_list()), gold_diagnosis=case.diagnosis,
                gold_icd10=case.icd10_code, turns=(), terminated="error", run_seed=seed,
                error={"turn_index": 0, "message": f"{type(exc).__name__}: {exc}"},
            )
        write_atomic(path, transcript.to_json())
        return path, transcript

    with ThreadPoolExecutor(max_workers=config.width) as pool:
        for path, transcript in pool.map(work, todo):
            if transcript.terminated == "error":
                summary.failed.append((path, transcript.error["message"]))
            else:
                summary.succeeded.append(path)
    return summary


def load_transcripts(directory: str | Path) -> list[Transcript]:
    return [Transcript.read(p) for p in sorted(Path(directory).glob("*.json")) if p.name != "manifest.json"]
