"""LLM-as-judge scoring over the evaluation questionnaire."""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Callable, Iterable, Mapping, Sequence

from veripatient.llm import ChatMessage, Gateway, Role, render_template
from veripatient.taxonomy import NoiseProfile, describe_profile

if TYPE_CHECKING:
    from veripatient.cases import PatientCase
    from veripatient.runner import Transcript

logger = logging.getLogger(__name__)


class JudgeError(ValueError):
    """Judge output could not be used. ``raw`` keeps the model's text."""

    def __init__(self, message: str, raw: str = "", criterion: str = ""):
        super().__init__(message)
        self.raw = raw
        self.criterion = criterion


class JudgeParseError(JudgeError):
    pass


class JudgeRangeError(JudgeError):
    pass


@dataclass(frozen=True)
class Criterion:
    id: str  # a1..c3
    name: str
    definition: str
    binary: bool = False

    @property
    def scale(self) -> str:
        return '"yes" or "no"' if self.binary else "1 (Poor) to 5 (Excellent)"

    @property
    def score_format(self) -> str:
        return '"yes" | "no"' if self.binary else "[integer 1-5]"


CRITERIA: tuple[Criterion, ...] = (
    Criterion("a1", "Fabricated symptom",
              "Did the patient report any symptom that is absent from the ground-truth symptom list?",
              binary=True),
    Criterion("a2", "Impossible claim",
              "Did the patient say something medically impossible or contradict an earlier statement?",
              binary=True),
    Criterion("a3", "Diagnosis disclosure",
              "Did the patient name the diagnosis or share information only a clinician would know?",
              binary=True),
    Criterion("b1", "Naturalness", "The replies read as if a real person wrote them."),
    Criterion("b2", "Noise behaviors", "The patient showed the communication barriers in the assigned noise profile."),
    Criterion("b3", "Persona consistency", "The patient kept one coherent personality for the whole interview."),
    Criterion("b4", "Patient language", "The patient used lay wording rather than clinical vocabulary."),
    Criterion("b5", "Disclosure pattern", "How much and how readily the patient disclosed fits the noise profile."),
    Criterion("c1", "History difficulty",
              "How hard was it to obtain a complete history? 1 = too easy, 3 = appropriately "
              "challenging, 5 = unrealistically difficult."),
    Criterion("c2", "Diagnostic reachability",
              "Could a clinician reach the correct diagnosis from this interview? 1 = impossible, "
              "3 = challenging but achievable, 5 = straightforward."),
    Criterion("c3", "Training value", "How useful is this interaction for training students? 1 = not useful, 5 = highly useful."),
)
CRITERIA_BY_ID = {c.id: c for c in CRITERIA}
SECTION_A = tuple(c for c in CRITERIA if c.binary)

BINARY_IDS = ("a1", "a2", "a3")
LIKERT_IDS = ("b1", "b2", "b3", "b4", "b5", "c1", "c2", "c3")


@dataclass(frozen=True)
class JudgeScores:
    """Questionnaire answers for one unit (a conversation or a single response).

    Items that were not asked stay ``None``. ``reasoning`` maps item id to the
    judge's (or annotator's) justification.
    """

    case_id: str = ""
    doctor_id: str = ""
    mode: str = ""
    condition: str = "noisy"
    unit: str = "conversation"  # conversation | response
    turn_index: int | None = None
    rater: str = "llm"
    a1: bool | None = None
    a2: bool | None = None
    a3: bool | None = None
    b1: int | None = None
    b2: int | None = None
    b3: int | None = None
    b4: int | None = None
    b5: int | None = None
    c1: int | None = None
    c2: int | None = None
    c3: int | None = None
    reasoning: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.unit not in ("conversation", "response"):
            raise ValueError(f"unit must be conversation or response, got {self.unit!r}")
        for item in BINARY_IDS:
            value = getattr(self, item)
            if value is not None and not isinstance(value, bool):
                raise JudgeRangeError(f"{item} must be yes/no, got {value!r}", criterion=item)
        for item in LIKERT_IDS:
            value = getattr(self, item)
            if value is None:
                continue
            if isinstance(value, bool) or not isinstance(value, int) or not 1 <= value <= 5:
                raise JudgeRangeError(f"{item} must be an integer 1-5, got {value!r}", criterion=item)

    @property
    def key(self) -> tuple:
        return (self.case_id, self.doctor_id, self.mode, self.condition, self.unit, self.turn_index)

    @property
    def truth_preserved(self) -> bool | None:
        items = (self.a1, self.a2, self.a3)
        if any(v is None for v in items):
            return None
        return not any(items)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["reasoning"] = dict(self.reasoning)
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> JudgeScores:
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown judgment fields: {sorted(unknown)}")
        values = dict(data)
        for item in BINARY_IDS:
            if isinstance(values.get(item), str):
                values[item] = parse_yes_no(values[item], item)
        return cls(**values)


def parse_yes_no(value: Any, criterion: str = "") -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in ("yes", "no"):
        return value.strip().lower() == "yes"
    raise JudgeRangeError(f"expected yes/no, got {value!r}", criterion=criterion)


_FENCE = re.compile(r"```(?:json)?", re.IGNORECASE)


def parse_judge_output(raw: str, criterion: Criterion) -> tuple[bool | int, str]:
    """Return (score, reasoning) from the judge's JSON answer."""
    text = _FENCE.sub("", raw)
    decoder = json.JSONDecoder()
    for match in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, match.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and "score" in obj:
            break
    else:
        raise JudgeParseError(f"no JSON score for {criterion.id}", raw=raw, criterion=criterion.id)
    reasoning = obj.get("reasoning")
    reasoning = reasoning if isinstance(reasoning, str) else ""
    score = obj["score"]
    if criterion.binary:
        try:
            return parse_yes_no(score, criterion.id), reasoning
        except JudgeRangeError as exc:
            raise JudgeRangeError(str(exc), raw=raw, criterion=criterion.id) from None
    if isinstance(score, str) and score.strip().lstrip("-").isdigit():
        score = int(score.strip())
    if isinstance(score, float) and score.is_integer():
        score = int(score)
    if isinstance(score, bool) or not isinstance(score, int):
        raise JudgeParseError(f"{criterion.id} score is not an integer: {score!r}", raw=raw, criterion=criterion.id)
    if not 1 <= score <= 5:
        raise JudgeRangeError(f"{criterion.id} score {score} outside 1-5", raw=raw, criterion=criterion.id)
    return score, reasoning


def render_transcript(transcript: Transcript, upto: int | None = None) -> str:
    lines = []
    for turn in transcript.turns:
        if upto is not None and turn.index > upto:
            break
        lines.append(f"[{turn.index}] Doctor: {turn.doctor_text}")
        if turn.patient_text is not None:
            lines.append(f"[{turn.index}] Patient: {turn.patient_text}")
    if transcript.forced_response:
        lines.append(f"Doctor (final): {transcript.forced_response}")
    return "\n".join(lines)


def judge_prompt(
    criterion: Criterion, transcript: Transcript, case: PatientCase, turn_index: int | None = None
) -> str:
    profile = NoiseProfile.from_list(transcript.noise_profile)
    text = render_transcript(transcript, upto=turn_index)
    if turn_index is not None:
        text += f"\n\nJudge only the patient response at turn [{turn_index}]."
    return render_template("judge", {
        "ground_truth_symptoms": "; ".join(case.symptoms),
        "noise_profile": describe_profile(profile),
        "transcript": text,
        "criterion_name": f"{criterion.id.upper()} {criterion.name}",
        "criterion_definition": criterion.definition,
        "criterion_scale": criterion.scale,
        "score_format": criterion.score_format,
    })


def judge_conversation(
    transcript: Transcript,
    case: PatientCase,
    gateway: Gateway,
    criteria: Sequence[Criterion] = CRITERIA,
    *,
    turn_index: int | None = None,
) -> JudgeScores:
    """Score one transcript, one judge call per criterion.

    With ``turn_index`` the unit is that single patient response (usually
    asked with Section A only).
    """
    if case.patient_id != transcript.case_id:
        raise ValueError(f"case {case.patient_id} does not match transcript {transcript.case_id}")
    scores: dict[str, Any] = {}
    reasoning: dict[str, str] = {}
    for criterion in criteria:
        prompt = judge_prompt(criterion, transcript, case, turn_index)
        raw = gateway.complete(Role.JUDGE, [ChatMessage("system", prompt), ChatMessage("user", "Return the JSON now.")])
        scores[criterion.id], reasoning[criterion.id] = parse_judge_output(raw, criterion)
    return JudgeScores(
        case_id=transcript.case_id,
        doctor_id=transcript.doctor_id,
        mode=transcript.mode,
        condition=transcript.condition,
        unit="conversation" if turn_index is None else "response",
        turn_index=turn_index,
        reasoning=reasoning,
        **scores,
    )


def judge_responses(
    transcript: Transcript, case: PatientCase, gateway: Gateway, criteria: Sequence[Criterion] = SECTION_A
) -> list[JudgeScores]:
    """Per-response judgments for every turn that has a patient reply."""
    return [
        judge_conversation(transcript, case, gateway, criteria, turn_index=t.index)
        for t in transcript.turns
        if t.patient_text is not None
    ]


def judge_batch(
    transcripts: Sequence[Transcript],
    cases: Mapping[str, PatientCase],
    gateway_for: Callable[[Transcript], Gateway],
    *,
    per_response: bool = True,
    width: int = 1,
) -> list[JudgeScores]:
    """Judge every transcript; output order follows ``transcripts``.

    Each transcript gets its own gateway from ``gateway_for`` so replay
    backends stay isolated. Error transcripts are skipped.
    """
    usable = [t for t in transcripts if t.terminated != "error"]

    def work(transcript: Transcript) -> list[JudgeScores]:
        gateway = gateway_for(transcript)
        case = cases[transcript.case_id]
        out = [judge_conversation(transcript, case, gateway)]
        if per_response:
            out.extend(judge_responses(transcript, case, gateway))
        return out

    with ThreadPoolExecutor(max_workers=max(1, width)) as pool:
        return [j for batch in pool.map(work, usable) for j in batch]


def write_judgments(path: str | Path, judgments: Iterable[JudgeScores]) -> None:
    lines = [json.dumps(j.to_dict(), sort_keys=True, ensure_ascii=False) for j in judgments]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_judgments(path: str | Path) -> list[JudgeScores]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(JudgeScores.from_dict(json.loads(line)))
        except (json.JSONDecodeError, ValueError, TypeError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    return out
