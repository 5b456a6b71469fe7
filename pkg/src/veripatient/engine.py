"""Generate-Verify-Refine loop for one simulated patient.

The generator only ever sees a :class:`GeneratorView`. Each candidate is
leak-scanned deterministically, then (unless verification is disabled)
judged by the LLM verifier against the case's per-symptom context. Rejected
candidates are regenerated with feedback; when attempts run out the patient
says the fallback line instead.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from veripatient.cases import GeneratorView, PatientCase, generator_view
from veripatient.llm import ChatMessage, Gateway, Role, render_template
from veripatient.taxonomy import describe_profile, render_profile_block

logger = logging.getLogger(__name__)

FALLBACK_TEXT = "I'm not sure, can you ask me something else?"
DEFAULT_MAX_ATTEMPTS = 2

PASS = "PASS"
REGENERATE = "REGENERATE"

UNPARSEABLE = "unparseable_verdict"
LEAK = "diagnosis_leak"
EMPTY = "empty_response"


class Mode(str, Enum):
    HYBRID = "hybrid"
    PROMPT_ONLY = "prompt_only"
    NO_CONTROLLER = "no_controller"

    @classmethod
    def parse(cls, text: str | Mode) -> Mode:
        return cls(text.replace("-", "_") if isinstance(text, str) else text)


@dataclass(frozen=True)
class CandidateResponse:
    text: str
    attempt_index: int


@dataclass(frozen=True)
class Verdict:
    verdict: str
    reasoning: str
    issue: str | None = None

    def __post_init__(self) -> None:
        if self.verdict not in (PASS, REGENERATE):
            raise ValueError(f"verdict must be PASS or REGENERATE, got {self.verdict!r}")
        if self.verdict == REGENERATE and not self.issue:
            raise ValueError("a REGENERATE verdict needs an issue")

    @property
    def passed(self) -> bool:
        return self.verdict == PASS

    def to_dict(self) -> dict:
        return {"verdict": self.verdict, "reasoning": self.reasoning, "issue": self.issue}

    @classmethod
    def from_dict(cls, data: dict) -> Verdict:
        return cls(data["verdict"], data.get("reasoning", ""), data.get("issue"))


@dataclass(frozen=True)
class EngineConfig:
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    mode: Mode = Mode.HYBRID
    fallback_text: str = FALLBACK_TEXT

    def __post_init__(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be at least 1")
        object.__setattr__(self, "mode", Mode.parse(self.mode))


@dataclass
class ConversationState:
    """Per-conversation engine state. ``history`` holds (doctor, patient) pairs."""

    case: PatientCase
    history: list[tuple[str, str]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.view: GeneratorView = generator_view(self.case)
        self.profile_block: str = render_profile_block(self.view.noise_profile)


@dataclass(frozen=True)
class PatientTurn:
    text: str
    attempts: int
    verdicts: tuple[Verdict, ...]
    fallback_used: bool
    verifier_calls: int


# --- generation ---------------------------------------------------------------

def patient_prompt(view: GeneratorView, profile_block: str) -> str:
    demo = view.demographics
    return render_template("patient", {
        "age": str(demo.age),
        "sex": demo.sex,
        "occupation_line": f"\nOccupation: {demo.occupation}." if demo.occupation else "",
        "symptoms_list": ", ".join(view.symptoms),
        "noise_profile_block": profile_block,
    })


def generator_messages(
    view: GeneratorView,
    history: Sequence[tuple[str, str]],
    doctor_utterance: str,
    profile_block: str,
    feedback: str | None = None,
) -> list[ChatMessage]:
    messages = [ChatMessage("system", patient_prompt(view, profile_block))]
    for doctor, patient in history:
        messages.append(ChatMessage("user", doctor))
        messages.append(ChatMessage("assistant", patient))
    messages.append(ChatMessage("user", doctor_utterance))
    if feedback:
        messages.append(ChatMessage(
            "system",
            f"Your previous draft was rejected. {feedback}. Write a new reply to the doctor's last question.",
        ))
    return messages


def generate_candidate(
    view: GeneratorView,
    history: Sequence[tuple[str, str]],
    doctor_utterance: str,
    profile_block: str,
    gateway: Gateway,
    feedback: str | None = None,
    attempt_index: int = 1,
) -> CandidateResponse:
    messages = generator_messages(view, history, doctor_utterance, profile_block, feedback)
    text = gateway.complete(Role.PATIENT_GENERATOR, messages)
    return CandidateResponse(text.strip(), attempt_index)


# --- verification ---------------------------------------------------------------

def _norm(text: str) -> str:
    return " ".join(text.lower().split())


def leak_scan(text: str, diagnosis: str, icd10: str) -> str | None:
    """Return the ground-truth label found in ``text``, or None if clean."""
    haystack = _norm(text)
    if diagnosis.strip() and _norm(diagnosis) in haystack:
        return diagnosis
    if icd10.strip() and icd10.strip().lower() in text.lower():
        return icd10
    return None


def _demographics_line(case: PatientCase) -> str:
    d = case.demographics
    line = f"age {d.age}, sex {d.sex}"
    return f"{line}, occupation {d.occupation}" if d.occupation else line


def verifier_prompt(
    candidate: CandidateResponse,
    case: PatientCase,
    history: Sequence[tuple[str, str]],
    mode: Mode,
) -> str:
    mode = Mode.parse(mode)
    if mode is Mode.NO_CONTROLLER:
        raise ValueError("no verifier prompt in no_controller mode")
    if mode is Mode.HYBRID:
        if not case.umls_context:
            raise ValueError(f"case {case.patient_id} has no semantic context; preprocess it first")
        context = case.context_json()
    else:
        context = "{}"
    statements = "\n".join(f"- {patient}" for _, patient in history) or "(none yet)"
    return render_template("verifier", {
        "ground_truth_symptoms": "; ".join(case.symptoms),
        "umls_context_json": context,
        "demographics": _demographics_line(case),
        "noise_profile": describe_profile(generator_view(case).noise_profile),
        "patient_history": statements,
        "candidate_response": candidate.text,
    })


_FENCE = re.compile(r"```(?:json)?", re.IGNORECASE)


def parse_verdict(raw: str) -> Verdict:
    """Read the verifier's JSON verdict. Anything unreadable is a REGENERATE."""
    text = _FENCE.sub("", raw)
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict) or "verdict" not in obj:
            continue
        verdict = str(obj["verdict"]).strip().upper()
        if verdict not in (PASS, REGENERATE):
            break
        reasoning = obj.get("reasoning")
        reasoning = reasoning if isinstance(reasoning, str) else ""
        issue = obj.get("issue")
        if not isinstance(issue, str) or issue.strip().lower() in ("", "null", "none"):
            issue = None
        if verdict == PASS:
            return Verdict(PASS, reasoning, None)
        return Verdict(REGENERATE, reasoning, issue or reasoning or "unspecified")
    return Verdict(REGENERATE, f"unparseable verifier output: {raw[:200]!r}", UNPARSEABLE)


def verify_candidate(
    candidate: CandidateResponse,
    case: PatientCase,
    history: Sequence[tuple[str, str]],
    gateway: Gateway,
    mode: Mode = Mode.HYBRID,
) -> Verdict:
    prompt = verifier_prompt(candidate, case, history, mode)
    raw = gateway.complete(Role.VERIFIER, [ChatMessage("user", prompt)])
    return parse_verdict(raw)


# --- the loop -------------------------------------------------------------------

def _redact(text: str, case: PatientCase) -> str:
    for term in (case.diagnosis, case.icd10_code):
        if term.strip():
            text = re.sub(re.escape(term.strip()), "[withheld]", text, flags=re.IGNORECASE)
    return text


def feedback_for(verdict: Verdict, case: PatientCase) -> str:
    """Regeneration hint. Ground-truth labels are redacted so the generator stays blind."""
    issue = verdict.issue or "unspecified"
    if issue == LEAK:
        return "Response contains a diagnosis leak: never name a diagnosis or diagnostic code"
    if issue == UNPARSEABLE:
        return "Response contains content that could not be verified: stay close to the listed symptoms"
    if issue == EMPTY:
        return "Response contains no text: answer the doctor's question"
    return f"Response contains {_redact(issue, case)}"


def respond(
    doctor_utterance: str,
    state: ConversationState,
    config: EngineConfig,
    gateway: Gateway,
) -> PatientTurn:
    """Produce the patient's reply to one doctor message.

    The returned text is either a candidate that passed the leak scan and
    (in verified modes) the verifier, or ``config.fallback_text``. The caller
    appends the exchange to ``state.history``.
    """
    case = state.case
    verdicts: list[Verdict] = []
    verifier_calls = 0
    feedback: str | None = None

    for attempt in range(1, config.max_attempts + 1):
        candidate = generate_candidate(
            state.view, state.history, doctor_utterance, state.profile_block,
            gateway, feedback, attempt,
        )
        if not candidate.text:
            verdict = Verdict(REGENERATE, "generator returned empty text", EMPTY)
        elif leak_scan(candidate.text, case.diagnosis, case.icd10_code):
            verdict = Verdict(REGENERATE, "deterministic scan found a ground-truth label", LEAK)
        elif config.mode is Mode.NO_CONTROLLER:
            return PatientTurn(candidate.text, attempt, tuple(verdicts), False, 0)
        else:
            verdict = verify_candidate(candidate, case, state.history, gateway, config.mode)
            verifier_calls += 1
            if verdict.passed:
                verdicts.append(verdict)
                return PatientTurn(candidate.text, attempt, tuple(verdicts), False, verifier_calls)
        verdicts.append(verdict)
        feedback = feedback_for(verdict, case)
        logger.debug("case %s attempt %d rejected: %s", case.patient_id, attempt, verdict.issue)

    return PatientTurn(config.fallback_text, config.max_attempts, tuple(verdicts), True, verifier_calls)
